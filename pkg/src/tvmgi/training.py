"""Objectives, optimiser, learning-rate schedule and the training loop."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datamodel import PathLike, Sample, SegmentAnnotation, load_sample
from .model import ModelConfig, ModelParams, bind_params, forward, init_params, save_checkpoint
from .numerics import ContractError, GradCheckReport, Tape, Var, grad_check
from .synthgen import (
    ClusterPool,
    DatasetManifest,
    GenConfig,
    gen_sample,
    inject_shots,
    make_pool,
    shuffle_shots,
)

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
ADAM_EPS = 1e-8


class TrainConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.01
    tau: float = 0.5
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    precision: str = "float32"
    use_rank_loss: bool = True
    shuffle_prob: float = 1.0
    inject_prob: float = 1.0
    max_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        for name in ("epochs", "batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise TrainConfigError(name, f"must be a positive integer, got {v!r}")
        if not self.peak_lr > 0:
            raise TrainConfigError("peak_lr", "must be > 0")
        if not 0 < self.warmup_ratio < 1:
            raise TrainConfigError("warmup_ratio", "must lie in (0, 1)")
        if not self.tau > 0:
            raise TrainConfigError("tau", "must be > 0")
        if self.weight_decay < 0:
            raise TrainConfigError("weight_decay", "must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise TrainConfigError("betas", "must be two values in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise TrainConfigError("precision", "must be 'float32' or 'float64'")
        for name in ("shuffle_prob", "inject_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise TrainConfigError(name, "must lie in [0, 1]")
        if self.max_steps is not None and (not isinstance(self.max_steps, int) or self.max_steps < 1):
            raise TrainConfigError("max_steps", "must be a positive integer or null")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise TrainConfigError("seed", "must be a nonnegative integer")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in data:
            if k not in known:
                raise TrainConfigError(k, "unknown TrainConfig field")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class LossBreakdown:
    l_m: float
    l_r: float
    l_g: float
    total: float

    @classmethod
    def of(cls, l_m: float, l_r: float, l_g: float) -> "LossBreakdown":
        return cls(l_m, l_r, l_g, l_m + l_r + l_g)

    def is_finite(self) -> bool:
        return all(math.isfinite(x) for x in (self.l_m, self.l_r, self.l_g, self.total))


# ------------------------------------------------------------------- losses
def bce_terms(match: Var, labels: np.ndarray) -> Var:
    """Per-pair binary cross-entropy, same shape as ``match``."""
    tape = match.tape
    m = np.asarray(labels, dtype=tape.dtype)
    if m.shape != match.shape:
        raise ContractError(f"labels shape {m.shape} != scores shape {match.shape}")
    p = tape.clip(match, PROB_EPS, 1 - PROB_EPS)
    pos = tape.mul(tape.log(p), m)
    neg = tape.mul(tape.log(tape.sub(np.ones(m.shape), p)), 1 - m)
    return tape.neg(tape.add(pos, neg))


def bce_matching_loss(match: Var, labels: np.ndarray) -> Var:
    """Summed binary cross-entropy over all (sentence, shot) pairs."""
    return match.tape.sum(bce_terms(match, labels))


def _rank_rows(annotations: Sequence[SegmentAnnotation], n_shots: int):
    """One row per (sentence, iteration r): sentence index and positive-shot mask."""
    by_sentence: Dict[int, List[SegmentAnnotation]] = {}
    for a in annotations:
        by_sentence.setdefault(a.sentence_index, []).append(a)
    rows, masks = [], []
    for i in sorted(by_sentence):
        anns = by_sentence[i]
        for r in range(len(anns)):
            mask = np.zeros(n_shots, dtype=bool)
            for a in anns:
                if a.rank > r:
                    mask[a.shot_index] = True
            rows.append(i)
            masks.append(mask)
    return np.array(rows, dtype=np.int64), np.array(masks, dtype=bool).reshape(len(rows), n_shots)


def rank_terms(match: Var, annotations: Sequence[SegmentAnnotation], tau: float) -> List[Var]:
    """One contrastive term per (sentence, iteration); empty without annotations."""
    tape = match.tape
    rows, masks = _rank_rows(annotations, match.shape[1])
    if len(rows) == 0:
        return []
    logits = tape.scale(tape.index(match, rows), 1.0 / tau)
    return [tape.sub(tape.logsumexp(logits), tape.logsumexp(logits, mask=masks))]


def rank_contrastive_loss(match: Var, annotations: Sequence[SegmentAnnotation], tau: float) -> Var:
    """Rank-aware contrastive loss over every shot of the sample.

    Iteration ``r`` of sentence ``i`` treats matched shots with rank > r as
    positives; the denominator runs over all shots, matched or not.
    """
    terms = rank_terms(match, annotations, tau)
    return match.tape.sum(terms[0]) if terms else match.tape.const(0.0)


def boundary_terms(start: Var, end: Var, annotations: Sequence[SegmentAnnotation]) -> List[Var]:
    """``-log`` start and end probabilities at each annotated segment."""
    tape = start.tape
    if not annotations:
        return []
    L_t, L_v, L_f = start.shape
    I = np.array([a.sentence_index for a in annotations])
    J = np.array([a.shot_index for a in annotations])
    S = np.array([a.start for a in annotations])
    E = np.array([a.end - 1 for a in annotations])
    if (I.min() < 0 or I.max() >= L_t or J.min() < 0 or J.max() >= L_v
            or S.min() < 0 or E.max() >= L_f or (E < S).any()):
        raise ContractError("annotation references a frame outside the score tensor")
    ps = tape.clip(tape.index(start, (I, J, S)), PROB_EPS, 1 - PROB_EPS)
    pe = tape.clip(tape.index(end, (I, J, E)), PROB_EPS, 1 - PROB_EPS)
    return [tape.neg(tape.log(ps)), tape.neg(tape.log(pe))]


def boundary_loss(start: Var, end: Var, annotations: Sequence[SegmentAnnotation]) -> Var:
    """-log p_start at each segment's first frame, -log p_end at its last frame.

    Only annotated (sentence, shot) pairs are supervised.
    """
    tape = start.tape
    terms = boundary_terms(start, end, annotations)
    if not terms:
        return tape.const(0.0)
    return tape.add(tape.sum(terms[0]), tape.sum(terms[1]))


def loss_terms(tape: Tape, P: Mapping[str, Var], sample: Sample, cfg: ModelConfig,
               tau: float = 0.5, use_rank_loss: bool = True) -> Dict[str, List[Var]]:
    """Unreduced matching, rank and boundary terms; their elements sum to the total loss."""
    _, scores = forward(tape, P, sample.text_features, sample.frame_features, cfg,
                        sample.frame_positions())
    return {
        "l_m": [bce_terms(scores.match, sample.match_labels())],
        "l_r": rank_terms(scores.match, sample.annotations, tau) if use_rank_loss else [],
        "l_g": boundary_terms(scores.start, scores.end, sample.annotations),
    }


def total_loss(tape: Tape, P: Mapping[str, Var], sample: Sample, cfg: ModelConfig,
               tau: float = 0.5, use_rank_loss: bool = True) -> Tuple[Var, LossBreakdown]:
    parts = {}
    total = None
    for key, terms in loss_terms(tape, P, sample, cfg, tau, use_rank_loss).items():
        part = None
        for t in terms:
            part = tape.sum(t) if part is None else tape.add(part, tape.sum(t))
        parts[key] = 0.0 if part is None else float(part.value)
        if part is not None:
            total = part if total is None else tape.add(total, part)
    return total, LossBreakdown.of(parts["l_m"], parts["l_r"], parts["l_g"])


def loss_and_grads(params: Mapping[str, np.ndarray], sample: Sample, cfg: ModelConfig,
                   tau: float = 0.5, use_rank_loss: bool = True, dtype=np.float32
                   ) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    tape = Tape(dtype)
    P = bind_params(tape, params)
    total, breakdown = total_loss(tape, P, sample, cfg, tau, use_rank_loss)
    if not breakdown.is_finite():
        return breakdown, {}
    return breakdown, tape.backward(total)


# tiny problem for the gradient check: L_t=3, L_v=4, L_f=5, d=16, N=2, 2 heads
GRADCHECK_GEN = GenConfig(d_in=8, sentences=(3, 3), frames_per_shot=5, shots_per_sentence=(1, 1),
                          distractor_shots=(1, 1), concept_count=16, cluster_count=2,
                          min_segment_frames=2)
GRADCHECK_MODEL = ModelConfig(d=16, n_layers=2, n_heads=2, d_in=8)


def check_loss_gradients(seed: int = 0, tol: float = 1e-4, h: float = 1e-5,
                         use_rank_loss: bool = True) -> GradCheckReport:
    """Finite-difference check of the full objective on the tiny problem.

    ``seed`` picks both the synthetic sample and the parameter init.
    """
    sample = gen_sample(GRADCHECK_GEN, seed)
    params = init_params(GRADCHECK_MODEL, seed)

    def terms(tape, P):
        parts = loss_terms(tape, P, sample, GRADCHECK_MODEL, use_rank_loss=use_rank_loss)
        return [t for group in parts.values() for t in group]

    return grad_check(terms, params, h=h, tol=tol)


# ---------------------------------------------------------------- optimiser
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
               lr: float, betas: Tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.01,
               eps: float = ADAM_EPS) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One AdamW update with bias correction and decoupled weight decay."""
    b1, b2 = betas
    t = state.t + 1
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p
        new_p[k] = (p - lr * update).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, t)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def cosine_schedule(step: int, total_steps: int, warmup_ratio: float, peak_lr: float) -> float:
    """Linear warm-up to ``peak_lr`` then cosine annealing to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_ratio)
    if step <= w:
        return peak_lr * step / w if w else peak_lr
    return peak_lr * 0.5 * (1 + math.cos(math.pi * (step - w) / (total_steps - w)))


# --------------------------------------------------------------------- loop
def augment_for_training(sample: Sample, tcfg: TrainConfig, epoch: int, index: int,
                         pool: Optional[ClusterPool] = None, inject_range: Tuple[int, int] = (1, 3)
                         ) -> Sample:
    """Seeded per-(epoch, sample) shuffling and, given a pool, injection."""
    rng = np.random.default_rng([tcfg.seed, epoch, index, 0xA06])
    seed = int(rng.integers(2**31))
    if rng.random() < tcfg.shuffle_prob:
        sample = shuffle_shots(sample, seed)
    if rng.random() < tcfg.inject_prob and pool is not None:
        k = int(rng.integers(max(inject_range[0], 1), max(inject_range[1], 1) + 1))
        sample = inject_shots(sample, pool, k, seed)
    return sample


@dataclass
class TrainResult:
    params: ModelParams
    log: List[dict]


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def train(samples: Sequence[Sample], tcfg: TrainConfig, mcfg: ModelConfig,
          gen_cfg: Optional[GenConfig] = None, out_dir: Optional[PathLike] = None,
          threads: int = 1, params: Optional[ModelParams] = None) -> TrainResult:
    """Train on in-memory samples; optionally write checkpoint and JSON-lines log.

    ``gen_cfg`` supplies the cluster pool for injection augmentation; without
    it injection is skipped.  Per-sample gradients inside a batch may be
    computed on ``threads`` workers and are always reduced in sample order.
    """
    if not samples:
        raise TrainConfigError("data", "training split is empty")
    dtype = tcfg.dtype
    params = init_params(mcfg) if params is None else params
    params = {k: np.asarray(v, dtype=dtype).copy() for k, v in params.items()}
    state = AdamState.zeros_like(params)
    pool = make_pool(gen_cfg) if gen_cfg is not None and tcfg.inject_prob > 0 else None
    inject_range = gen_cfg.inject_shots if gen_cfg is not None else (1, 3)

    per_epoch = steps_per_epoch(len(samples), tcfg.batch_size)
    total_steps = tcfg.epochs * per_epoch
    if tcfg.max_steps is not None:
        total_steps = min(total_steps, tcfg.max_steps)

    records: List[dict] = []
    log_file = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w", encoding="utf-8")

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        step = 0
        for epoch in range(tcfg.epochs):
            order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(samples))
            for b in range(per_epoch):
                if step >= total_steps:
                    break
                step += 1
                batch = [int(i) for i in order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]]

                def work(i, params=params, epoch=epoch):
                    s = augment_for_training(samples[i], tcfg, epoch, i, pool, inject_range)
                    return loss_and_grads(params, s, mcfg, tcfg.tau, tcfg.use_rank_loss, dtype)

                results = list(executor.map(work, batch)) if executor else [work(i) for i in batch]
                # reduce in sample-index order whatever the batch order
                results = [r for _, r in sorted(zip(batch, results), key=lambda x: x[0])]
                n = len(results)
                breakdown = LossBreakdown.of(
                    sum(r[0].l_m for r in results) / n,
                    sum(r[0].l_r for r in results) / n,
                    sum(r[0].l_g for r in results) / n)
                if not breakdown.is_finite():
                    raise NonFiniteLossError(step, breakdown)
                grads = {}
                for k in params:
                    acc = results[0][1][k].copy()
                    for r in results[1:]:
                        acc += r[1][k]
                    grads[k] = acc / dtype.type(n)
                lr = cosine_schedule(step, total_steps, tcfg.warmup_ratio, tcfg.peak_lr)
                params, state = adamw_step(params, grads, state, lr, tcfg.betas, tcfg.weight_decay)
                rec = {"step": step, "lr": lr, "l_m": breakdown.l_m, "l_r": breakdown.l_r,
                       "l_g": breakdown.l_g, "total": breakdown.total}
                records.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                if step % 50 == 0:
                    log.info("step %d/%d lr=%.2e total=%.4f", step, total_steps, lr, breakdown.total)
    finally:
        if executor is not None:
            executor.shutdown()
        if log_file is not None:
            log_file.close()

    if out_dir is not None:
        save_checkpoint(params, mcfg, Path(out_dir) / "checkpoint")
    return TrainResult(params, records)


def train_from_manifest(manifest: DatasetManifest, tcfg: TrainConfig, mcfg: ModelConfig,
                        out_dir: Optional[PathLike] = None, threads: int = 1) -> TrainResult:
    samples = [load_sample(p) for p in manifest.split("train")]
    return train(samples, tcfg, mcfg, manifest.config, out_dir, threads)
