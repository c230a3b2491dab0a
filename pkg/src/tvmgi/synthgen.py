"""Planted-concept synthetic scripts and the shot augmentation strategies.

Every sentence is tied to a latent unit "concept".  Its embedding is the
concept plus isotropic Gaussian noise, and so are the frames of each of its
ground-truth segments.  Remaining frames, distractor shots and fillers use
concepts from other clusters.  Concepts in one cluster are correlated, which
makes same-cluster injected shots hard negatives.

With ``rank_drift > 0`` a sentence's later-played segments are observed
around a concept nudged away from the sentence's own, so playback order
(and hence rank) leaves a trace in the content that survives shuffling.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datamodel import (
    PathLike,
    Sample,
    SegmentAnnotation,
    Sentence,
    ShotBoundary,
    dump_json,
    save_sample,
)

# stream tags keep the RNG streams of pool / sample / augmentations disjoint
_POOL_STREAM = 0x504F4F4C
_SAMPLE_STREAM = 0x53414D50
_SHUFFLE_STREAM = 0x53485546
_INJECT_STREAM = 0x494E4A45

DATASET_MANIFEST = "dataset.json"


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


Range = Tuple[int, int]


@dataclass(frozen=True)
class GenConfig:
    d_in: int = 32
    sentences: Range = (2, 4)
    frames_per_shot: int = 8
    shots_per_sentence: Range = (1, 4)
    distractor_shots: Range = (1, 3)
    concept_count: int = 64
    cluster_count: int = 8
    noise_sigma: float = 0.1
    cluster_spread: float = 0.8
    min_segment_frames: int = 4
    inject_shots: Range = (1, 3)
    rank_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sentences", "shots_per_sentence", "distractor_shots", "inject_shots"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for name in ("d_in", "frames_per_shot", "concept_count", "cluster_count", "min_segment_frames"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", f"must be a nonnegative integer, got {self.seed!r}")
        for name in ("noise_sigma", "cluster_spread", "rank_drift"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not np.isfinite(v) or v < 0:
                raise ConfigError(name, f"must be a finite number >= 0, got {v!r}")
        for name, lo_min in (("sentences", 1), ("shots_per_sentence", 1),
                             ("distractor_shots", 0), ("inject_shots", 0)):
            r = getattr(self, name)
            if len(r) != 2 or not all(isinstance(x, int) and not isinstance(x, bool) for x in r):
                raise ConfigError(name, f"must be a [min, max] integer pair, got {list(r)!r}")
            if r[0] < lo_min or r[0] > r[1]:
                raise ConfigError(name, f"range {list(r)} is empty or below {lo_min}")
        if self.shots_per_sentence[1] > 5:
            raise ConfigError("shots_per_sentence", "at most 5 segments per sentence (top-5 evaluation)")
        if self.concept_count < self.cluster_count:
            raise ConfigError("concept_count", "must be >= cluster_count")
        smallest = self.concept_count // self.cluster_count
        if smallest < self.sentences[1] + 1:
            raise ConfigError("concept_count",
                              f"clusters hold {smallest} concepts; need > {self.sentences[1]} "
                              "(one per sentence plus one injectable)")
        if self.min_segment_frames > self.frames_per_shot:
            raise ConfigError("min_segment_frames", "exceeds frames_per_shot")

    @classmethod
    def from_dict(cls, data: Dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown GenConfig field")
        return cls(**data)

    def to_dict(self) -> Dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass(frozen=True, eq=False)
class ClusterPool:
    """Unit-norm concept vectors grouped into clusters."""

    concepts: np.ndarray          # concept_count x d_in
    cluster_ids: np.ndarray       # concept_count
    noise_sigma: float

    @property
    def cluster_count(self) -> int:
        return int(self.cluster_ids.max()) + 1

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_ids == cluster_id)

    def nearest_concept(self, vectors: np.ndarray) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        return np.argmax(v @ self.concepts.T, axis=-1)

    def infer_cluster(self, sample: Sample) -> int:
        ids = self.cluster_ids[self.nearest_concept(sample.text_features)]
        counts = np.bincount(ids, minlength=self.cluster_count)
        return int(np.argmax(counts))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_pool(cfg: GenConfig) -> ClusterPool:
    rng = np.random.default_rng([cfg.seed, _POOL_STREAM])
    centers = _unit(rng.standard_normal((cfg.cluster_count, cfg.d_in)))
    cluster_ids = np.arange(cfg.concept_count) % cfg.cluster_count
    jitter = rng.standard_normal((cfg.concept_count, cfg.d_in)) / np.sqrt(cfg.d_in)
    concepts = _unit(centers[cluster_ids] + cfg.cluster_spread * jitter)
    return ClusterPool(concepts=concepts, cluster_ids=cluster_ids, noise_sigma=float(cfg.noise_sigma))


def _observe(rng: np.random.Generator, concept: np.ndarray, sigma: float, n: int) -> np.ndarray:
    """``n`` noisy unit-normalised copies of ``concept``."""
    noisy = concept[None, :] + sigma * rng.standard_normal((n, concept.shape[0]))
    return _unit(noisy)


def _contiguous(n_shots: int, frames_per_shot: int, origin: int = 0) -> Tuple[ShotBoundary, ...]:
    return tuple(ShotBoundary(j, origin + j * frames_per_shot, origin + (j + 1) * frames_per_shot)
                 for j in range(n_shots))


def gen_sample(cfg: GenConfig, sample_seed: int, pool: Optional[ClusterPool] = None) -> Sample:
    pool = make_pool(cfg) if pool is None else pool
    rng = np.random.default_rng([sample_seed, _SAMPLE_STREAM])
    L_f, sigma = cfg.frames_per_shot, cfg.noise_sigma

    cluster = int(rng.integers(pool.cluster_count))
    members = pool.members(cluster)
    L_t = int(rng.integers(cfg.sentences[0], cfg.sentences[1] + 1))
    if L_t >= len(members):
        raise ConfigError("sentences", f"cluster {cluster} has only {len(members)} concepts")
    sent_concepts = rng.choice(members, size=L_t, replace=False)
    others = np.flatnonzero(pool.cluster_ids != cluster)
    if len(others) == 0:
        others = np.setdiff1d(members, sent_concepts)

    # timeline in original playback order: sentence segments in script order,
    # distractor shots dropped in at random positions
    timeline: List[Optional[int]] = []
    for i in range(L_t):
        n_seg = int(rng.integers(cfg.shots_per_sentence[0], cfg.shots_per_sentence[1] + 1))
        timeline.extend([i] * n_seg)
    n_distract = int(rng.integers(cfg.distractor_shots[0], cfg.distractor_shots[1] + 1))
    for _ in range(n_distract):
        timeline.insert(int(rng.integers(0, len(timeline) + 1)), None)

    text = np.stack([_observe(rng, pool.concepts[c], sigma, 1)[0] for c in sent_concepts])
    frames = np.empty((len(timeline), L_f, cfg.d_in))
    annotations: List[SegmentAnnotation] = []
    seg_counts = [timeline.count(i) for i in range(L_t)]
    played = [0] * L_t
    durations = [0] * L_t
    for j, owner in enumerate(timeline):
        filler = pool.concepts[int(rng.choice(others))]
        frames[j] = _observe(rng, filler, sigma, L_f)
        if owner is None:
            continue
        length = int(rng.integers(cfg.min_segment_frames, L_f + 1))
        start = int(rng.integers(0, L_f - length + 1))
        concept = pool.concepts[sent_concepts[owner]]
        if cfg.rank_drift > 0 and played[owner] > 0:
            nudge = rng.standard_normal(cfg.d_in) / np.sqrt(cfg.d_in)
            concept = _unit(concept + cfg.rank_drift * played[owner] * nudge)
        frames[j, start:start + length] = _observe(rng, concept, sigma, length)
        rank = seg_counts[owner] - played[owner]
        played[owner] += 1
        durations[owner] += length
        annotations.append(SegmentAnnotation(owner, j, start, start + length, rank))

    annotations.sort(key=lambda a: (a.sentence_index, -a.rank))
    sentences = tuple(Sentence(i, f"text_features[{i}]", durations[i]) for i in range(L_t))
    return Sample(
        sample_id=f"sample-{sample_seed:08d}",
        sentences=sentences,
        shots=_contiguous(len(timeline), L_f),
        frames_per_shot=L_f,
        annotations=tuple(annotations),
        text_features=text,
        frame_features=frames,
    )


def _reorder(sample: Sample, new_order: Sequence[Union[int, np.ndarray]]) -> Sample:
    """Rebuild a sample from a list of old shot indices and new frame blocks.

    Integers in ``new_order`` refer to existing shots; arrays are new shots
    with no annotations.
    """
    old_to_new = {}
    blocks = []
    for new_j, item in enumerate(new_order):
        if isinstance(item, (int, np.integer)):
            old_to_new[int(item)] = new_j
            blocks.append(sample.frame_features[int(item)])
        else:
            blocks.append(np.asarray(item, dtype=np.float32))
    origin = sample.shots[0].abs_start if sample.shots else 0
    annotations = tuple(SegmentAnnotation(a.sentence_index, old_to_new[a.shot_index], a.start, a.end, a.rank)
                        for a in sample.annotations)
    return sample.replace(
        shots=_contiguous(len(new_order), sample.frames_per_shot, origin),
        annotations=annotations,
        frame_features=np.stack(blocks) if blocks else sample.frame_features,
    )


def shuffle_shots(sample: Sample, seed: int) -> Sample:
    """Randomly permute the shots; boundaries are repacked in the new order."""
    rng = np.random.default_rng([seed, _SHUFFLE_STREAM])
    perm = rng.permutation(sample.num_shots)
    return _reorder(sample, [int(p) for p in perm])


def inject_shots(sample: Sample, pool: ClusterPool, k: int, seed: int,
                 cluster_id: Optional[int] = None, return_positions: bool = False):
    """Insert ``k`` unannotated shots drawn from one cluster at random positions.

    By default the cluster is the sample's own (inferred from its sentence
    embeddings), so the new shots are hard negatives.  Concepts carried by
    the sample's sentences are never injected.
    """
    if k < 0:
        raise ConfigError("k", "must be >= 0")
    if k == 0:
        return (sample, []) if return_positions else sample
    rng = np.random.default_rng([seed, _INJECT_STREAM])
    cluster = pool.infer_cluster(sample) if cluster_id is None else int(cluster_id)
    used = pool.nearest_concept(sample.text_features)
    eligible = np.setdiff1d(pool.members(cluster), used)
    if len(eligible) == 0:
        raise ConfigError("cluster", f"cluster {cluster} has no injectable concepts")

    order: List[Union[int, np.ndarray]] = list(range(sample.num_shots))
    for _ in range(k):
        concept = pool.concepts[int(rng.choice(eligible))]
        block = _observe(rng, concept, pool.noise_sigma, sample.frames_per_shot)
        order.insert(int(rng.integers(0, len(order) + 1)), block)
    out = _reorder(sample, order)
    if return_positions:
        return out, [j for j, item in enumerate(order) if not isinstance(item, int)]
    return out


def augment_test_sample(sample: Sample, cfg: GenConfig, pool: ClusterPool, sample_seed: int) -> Sample:
    rng = np.random.default_rng([sample_seed, _INJECT_STREAM, 1])
    k = int(rng.integers(max(cfg.inject_shots[0], 1), max(cfg.inject_shots[1], 1) + 1))
    shuffled = shuffle_shots(sample, sample_seed)
    return inject_shots(shuffled, pool, k, sample_seed)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    config: GenConfig
    train: Tuple[str, ...]
    test: Tuple[str, ...]

    def split(self, name: str) -> List[Path]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return [self.root / d for d in getattr(self, name)]


def gen_dataset(cfg: GenConfig, n_train: int, n_test: int, out_dir: PathLike,
                threads: int = 1) -> DatasetManifest:
    """Write ``n_train + n_test`` sample directories and ``dataset.json``.

    Sample ``i`` uses seed ``cfg.seed + i``; test samples are shuffled and
    receive at least one injected shot.
    """
    if n_train < 0 or n_test < 0:
        raise ConfigError("n_train" if n_train < 0 else "n_test", "must be >= 0")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    pool = make_pool(cfg)
    train = tuple(f"train/{i:06d}" for i in range(n_train))
    test = tuple(f"test/{i:06d}" for i in range(n_test))
    jobs = [(cfg.seed + i, rel, i >= n_train) for i, rel in enumerate(train + test)]

    def build(job):
        seed, rel, is_test = job
        s = gen_sample(cfg, seed, pool)
        if is_test:
            s = augment_test_sample(s, cfg, pool, seed)
        save_sample(s, root / rel)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(build, jobs))
    else:
        for job in jobs:
            build(job)
    dump_json({"config": cfg.to_dict(), "train": list(train), "test": list(test)}, root / DATASET_MANIFEST)
    return DatasetManifest(root, cfg, train, test)


def load_dataset_manifest(path: PathLike) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / DATASET_MANIFEST
    if not p.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {p}")
    data = json.loads(p.read_text(encoding="utf-8"))
    return DatasetManifest(p.parent, GenConfig.from_dict(data["config"]),
                           tuple(data["train"]), tuple(data["test"]))
