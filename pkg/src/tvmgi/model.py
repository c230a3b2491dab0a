"""Multi-grained text/video fusion encoder and its score heads.

All functions build onto a :class:`~tvmgi.numerics.Tape`; parameters are
passed in as a ``dict`` of tape handles keyed by the names produced by
:func:`init_params`.  Row-vector convention throughout: ``x @ W``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from .datamodel import DTYPE_TAG, PathLike, Sample, dump_json, read_tensor, write_tensor
from .numerics import Tape, Var


class ModelConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_in: int = 32
    use_pe: bool = True
    init_seed: int = 0

    def __post_init__(self):
        for name in ("d", "n_layers", "n_heads", "d_in"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ModelConfigError(name, f"must be a positive integer, got {v!r}")
        if self.d % self.n_heads:
            raise ModelConfigError("n_heads", f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not isinstance(self.init_seed, int) or self.init_seed < 0:
            raise ModelConfigError("init_seed", "must be a nonnegative integer")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for k in data:
            if k not in known:
                raise ModelConfigError(k, "unknown ModelConfig field")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


ModelParams = Dict[str, np.ndarray]

SELF_ATTN = ("q", "k", "v", "o")
XMHA = ("qa", "va", "oa", "qb", "vb", "ob")
STAGES = ("st", "fs", "ft")  # shot-text, frame-shot, frame-text
LAYER_NORMS = ("sa_text", "sa_frame", "st_shot", "st_text", "fs_frame", "ft_frame", "ft_text")
HEADS = ("match", "start", "end")


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, di = cfg.d, cfg.d_in
    shapes: Dict[str, Tuple[int, ...]] = {
        "proj.text.w": (di, d), "proj.text.b": (d,),
        "proj.frame.w": (di, d), "proj.frame.b": (d,),
        "proj.ln_text.g": (d,), "proj.ln_text.b": (d,),
        "proj.ln_frame.g": (d,), "proj.ln_frame.b": (d,),
    }
    for l in range(cfg.n_layers):
        for side in ("text", "frame"):
            for w in SELF_ATTN:
                shapes[f"layer{l}.sa_{side}.{w}"] = (d, d)
        for stage in STAGES:
            for w in XMHA:
                shapes[f"layer{l}.{stage}.{w}"] = (d, d)
        for ln in LAYER_NORMS:
            shapes[f"layer{l}.ln_{ln}.g"] = (d,)
            shapes[f"layer{l}.ln_{ln}.b"] = (d,)
    for head in HEADS:
        shapes[f"head.{head}.text"] = (d, d)
        shapes[f"head.{head}.video"] = (d, d)
    return shapes


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# --------------------------------------------------------------- components
def positional_encoding(positions, d: int) -> np.ndarray:
    """Sinusoidal encoding: channel 2i is sin(p / 10000^(2i/d)), 2i+1 the cosine.

    ``positions`` is either a length (positions 0..n-1) or an array of
    integer positions of any shape; the encoding is appended as a last axis.
    """
    pos = np.arange(positions) if np.isscalar(positions) else np.asarray(positions)
    pos = pos.astype(np.float64)
    pe = np.zeros(pos.shape + (d,))
    i2 = np.arange(0, d, 2)
    angle = pos[..., None] / np.power(10000.0, i2 / d)
    pe[..., 0::2] = np.sin(angle)
    pe[..., 1::2] = np.cos(angle[..., : d // 2])
    return pe


def project_inputs(tape: Tape, P: Mapping[str, Var], text, frames) -> Tuple[Var, Var]:
    """Affine maps of sentence features and frame features to width ``d``."""
    t = tape._lift(text)
    f = tape._lift(frames)
    X = tape.add(tape.matmul(t, P["proj.text.w"]), P["proj.text.b"])
    Y = tape.add(tape.matmul(f, P["proj.frame.w"]), P["proj.frame.b"])
    return X, Y


def _split_heads(tape: Tape, x: Var, n_heads: int) -> Var:
    n, d = x.shape
    return tape.transpose(tape.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(tape: Tape, x: Var) -> Var:
    h, n, dh = x.shape
    return tape.reshape(tape.transpose(x, (1, 0, 2)), (n, h * dh))


def self_attention(tape: Tape, x: Var, W: Mapping[str, Var], n_heads: int) -> Var:
    """Multi-head scaled dot-product self-attention plus residual: ``x + MHA(x)``."""
    dh = x.shape[1] // n_heads
    q = _split_heads(tape, tape.matmul(x, W["q"]), n_heads)
    k = _split_heads(tape, tape.matmul(x, W["k"]), n_heads)
    v = _split_heads(tape, tape.matmul(x, W["v"]), n_heads)
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    ctx = tape.matmul(tape.softmax(scores), v)
    return tape.add(x, tape.matmul(_merge_heads(tape, ctx), W["o"]))


def xmha(tape: Tape, a: Var, b: Var, W: Mapping[str, Var], n_heads: int) -> Tuple[Var, Var]:
    """Cross-modality attention exchanging context between ``a`` and ``b``.

    One affinity matrix ``A = (a Wqa)(b Wqb)^T / sqrt(d_head)`` per head is
    shared by both directions: ``a`` aggregates ``b``'s values through
    ``softmax(A)``, ``b`` aggregates ``a``'s through ``softmax(A^T)``.
    Returns ``(a + O_a, b + O_b)``.
    """
    dh = a.shape[1] // n_heads
    qa = _split_heads(tape, tape.matmul(a, W["qa"]), n_heads)
    qb = _split_heads(tape, tape.matmul(b, W["qb"]), n_heads)
    A = tape.scale(tape.matmul(qa, tape.transpose(qb, (0, 2, 1))), 1.0 / np.sqrt(dh))
    va = _split_heads(tape, tape.matmul(a, W["va"]), n_heads)
    vb = _split_heads(tape, tape.matmul(b, W["vb"]), n_heads)
    ctx_a = tape.matmul(tape.softmax(A), vb)
    ctx_b = tape.matmul(tape.softmax(tape.transpose(A, (0, 2, 1))), va)
    out_a = tape.add(a, tape.matmul(_merge_heads(tape, ctx_a), W["oa"]))
    out_b = tape.add(b, tape.matmul(_merge_heads(tape, ctx_b), W["ob"]))
    return out_a, out_b


def pool_shots(tape: Tape, frames: Var) -> Var:
    """Mean over the frame axis: ``L_v x L_f x d -> L_v x d``."""
    return tape.mean_axis(frames, 1)


class Encodings(NamedTuple):
    text: np.ndarray    # L_t x d
    frame: np.ndarray   # L_v x L_f x d
    shot: np.ndarray    # L_v x d


def encodings_for(L_t: int, frame_positions: np.ndarray, d: int) -> Encodings:
    L_v = frame_positions.shape[0]
    return Encodings(positional_encoding(L_t, d), positional_encoding(frame_positions, d),
                     positional_encoding(L_v, d))


def _layer_weights(P: Mapping[str, Var], l: int, group: str, keys) -> Dict[str, Var]:
    return {k: P[f"layer{l}.{group}.{k}"] for k in keys}


def fusion_layer(tape: Tape, P: Mapping[str, Var], l: int, X: Var, Y: Var, cfg: ModelConfig,
                 pe: Optional[Encodings] = None) -> Tuple[Var, Var]:
    """One encoder layer: self-attention, then shot-text, frame-shot, frame-text X-MHA."""
    L_v, L_f, d = Y.shape

    def ln(x, name):
        return tape.layer_norm(x, P[f"layer{l}.ln_{name}.g"], P[f"layer{l}.ln_{name}.b"])

    if pe is not None:
        X = tape.add(X, pe.text)
        Y = tape.add(Y, pe.frame)
    X = ln(self_attention(tape, X, _layer_weights(P, l, "sa_text", SELF_ATTN), cfg.n_heads), "sa_text")
    Yf = tape.reshape(Y, (L_v * L_f, d))
    Yf = ln(self_attention(tape, Yf, _layer_weights(P, l, "sa_frame", SELF_ATTN), cfg.n_heads), "sa_frame")

    Z = pool_shots(tape, tape.reshape(Yf, (L_v, L_f, d)))
    if pe is not None:
        Z = tape.add(Z, pe.shot)

    Z_vt, X_vt = xmha(tape, Z, X, _layer_weights(P, l, "st", XMHA), cfg.n_heads)
    Z_vt, X_vt = ln(Z_vt, "st_shot"), ln(X_vt, "st_text")
    # the shot-side output of frame-shot fusion is not consumed downstream
    _, Y_fv = xmha(tape, Z_vt, Yf, _layer_weights(P, l, "fs", XMHA), cfg.n_heads)
    Y_fv = ln(Y_fv, "fs_frame")
    Y_ft, X_ft = xmha(tape, Y_fv, X_vt, _layer_weights(P, l, "ft", XMHA), cfg.n_heads)
    Y_ft, X_ft = ln(Y_ft, "ft_frame"), ln(X_ft, "ft_text")
    return X_ft, tape.reshape(Y_ft, (L_v, L_f, d))


class FusionOutputs(NamedTuple):
    text_out: Var
    frame_out: Var
    shot_out: Var


class ScoreBundle(NamedTuple):
    """Matching probabilities and per-shot start/end distributions.

    ``match`` is ``L_t x L_v``; ``start`` and ``end`` are ``L_t x L_v x L_f``.
    Fields are tape handles from :func:`forward` or arrays from
    :func:`predict_scores`.
    """

    match: object
    start: object
    end: object


def forward(tape: Tape, P: Mapping[str, Var], text, frames, cfg: ModelConfig,
            frame_positions: Optional[np.ndarray] = None) -> Tuple[FusionOutputs, ScoreBundle]:
    frames_arr = frames.value if isinstance(frames, Var) else np.asarray(frames)
    if frames_arr.ndim != 3 or frames_arr.shape[2] != cfg.d_in:
        raise ValueError(f"frames must be L_v x L_f x {cfg.d_in}, got {frames_arr.shape}")
    text_arr = text.value if isinstance(text, Var) else np.asarray(text)
    if text_arr.ndim != 2 or text_arr.shape[1] != cfg.d_in:
        raise ValueError(f"text must be L_t x {cfg.d_in}, got {text_arr.shape}")
    L_t = text_arr.shape[0]
    L_v, L_f, _ = frames_arr.shape
    if frame_positions is None:
        frame_positions = np.arange(L_v * L_f).reshape(L_v, L_f)
    pe = encodings_for(L_t, frame_positions, cfg.d) if cfg.use_pe else None

    X, Y = project_inputs(tape, P, text, frames)
    # unit-norm inputs project to vectors far shorter than the encodings
    X = tape.layer_norm(X, P["proj.ln_text.g"], P["proj.ln_text.b"])
    Y = tape.layer_norm(Y, P["proj.ln_frame.g"], P["proj.ln_frame.b"])
    for l in range(cfg.n_layers):
        X, Y = fusion_layer(tape, P, l, X, Y, cfg, pe)
    Z = pool_shots(tape, Y)

    d = cfg.d
    mt = tape.matmul(X, P["head.match.text"])
    mv = tape.matmul(Z, P["head.match.video"])
    match = tape.sigmoid(tape.matmul(mt, tape.transpose(mv)))

    Yf = tape.reshape(Y, (L_v * L_f, d))

    def boundary(head):
        bt = tape.matmul(X, P[f"head.{head}.text"])
        bv = tape.matmul(Yf, P[f"head.{head}.video"])
        logits = tape.reshape(tape.matmul(bt, tape.transpose(bv)), (L_t, L_v, L_f))
        return tape.softmax(logits)

    return FusionOutputs(X, Y, Z), ScoreBundle(match, boundary("start"), boundary("end"))


def bind_params(tape: Tape, params: Mapping[str, np.ndarray]) -> Dict[str, Var]:
    return {k: tape.param(v, k) for k, v in params.items()}


def predict_scores(params: Mapping[str, np.ndarray], sample: Sample, cfg: ModelConfig,
                   dtype=np.float32) -> ScoreBundle:
    """Forward pass without gradient recording; returns arrays."""
    tape = Tape(dtype, grad=False)
    P = bind_params(tape, params)
    _, scores = forward(tape, P, sample.text_features, sample.frame_features, cfg,
                        sample.frame_positions())
    return ScoreBundle(scores.match.value, scores.start.value, scores.end.value)


# --------------------------------------------------------------- checkpoint
CHECKPOINT_MANIFEST = "manifest.json"


def save_checkpoint(params: Mapping[str, np.ndarray], cfg: ModelConfig, directory: PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, value in params.items():
        fname = f"{name}.f32"
        write_tensor(d / fname, value)
        tensors.append({"name": name, "file": fname, "dtype": DTYPE_TAG, "shape": list(np.shape(value))})
    dump_json({"model_config": cfg.to_dict(), "tensors": tensors}, d / CHECKPOINT_MANIFEST)


def load_checkpoint(directory: PathLike) -> Tuple[ModelParams, ModelConfig]:
    d = Path(directory)
    mpath = d / CHECKPOINT_MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    m = json.loads(mpath.read_text(encoding="utf-8"))
    cfg = ModelConfig.from_dict(m["model_config"])
    params = {t["name"]: read_tensor(d / t["file"], t["shape"], t["name"]) for t in m["tensors"]}
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) ^ set(params))
        raise ValueError(f"checkpoint parameters do not match config: {missing[:3]}")
    for k, shape in expected.items():
        if tuple(params[k].shape) != shape:
            raise ValueError(f"checkpoint tensor {k} has shape {params[k].shape}, expected {shape}")
    return {k: params[k] for k in expected}, cfg
