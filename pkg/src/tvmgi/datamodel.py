"""Script/shot/segment data structures and the on-disk sample format.

A sample directory holds ``manifest.json`` plus one headerless file of
row-major little-endian float32 values per tensor.  All intervals are
half-open ``[start, end)`` in frame units and every index is 0-based.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, "os.PathLike[str]"]

MANIFEST = "manifest.json"
DTYPE_TAG = "f32le"
_F32LE = np.dtype("<f4")


class SampleFormatError(ValueError):
    """Invalid sample on disk or in memory.  ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FrameRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Sentence:
    index: int
    embedding_ref: str
    duration_frames: int = 0


@dataclass(frozen=True)
class ShotBoundary:
    shot_index: int
    abs_start: int
    abs_end: int

    @property
    def length(self) -> int:
        return self.abs_end - self.abs_start


@dataclass(frozen=True)
class SegmentAnnotation:
    sentence_index: int
    shot_index: int
    start: int
    end: int
    rank: int


def abs_to_rel(boundary: ShotBoundary, abs_frame: int) -> int:
    if not boundary.abs_start <= abs_frame < boundary.abs_end:
        raise FrameRangeError(
            f"frame {abs_frame} outside shot {boundary.shot_index} "
            f"[{boundary.abs_start}, {boundary.abs_end})")
    return abs_frame - boundary.abs_start


def rel_to_abs(boundary: ShotBoundary, rel_frame: int) -> int:
    if not 0 <= rel_frame < boundary.length:
        raise FrameRangeError(
            f"relative frame {rel_frame} outside shot {boundary.shot_index} of length {boundary.length}")
    return boundary.abs_start + rel_frame


@dataclass(frozen=True, eq=False)
class Sample:
    """One script with its candidate shots and ground-truth segments.

    ``text_features`` is ``L_t x d_in``; ``frame_features`` is
    ``L_v x L_f x d_in``.  Construction validates every invariant, so a
    ``Sample`` that exists is a valid one.
    """

    sample_id: str
    sentences: Tuple[Sentence, ...]
    shots: Tuple[ShotBoundary, ...]
    frames_per_shot: int
    annotations: Tuple[SegmentAnnotation, ...]
    text_features: np.ndarray
    frame_features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        object.__setattr__(self, "shots", tuple(self.shots))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        tf = np.ascontiguousarray(self.text_features, dtype=np.float32)
        ff = np.ascontiguousarray(self.frame_features, dtype=np.float32)
        tf.setflags(write=False)
        ff.setflags(write=False)
        object.__setattr__(self, "text_features", tf)
        object.__setattr__(self, "frame_features", ff)
        validate(self)

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)

    @property
    def num_shots(self) -> int:
        return len(self.shots)

    @property
    def feature_dim(self) -> int:
        return int(self.text_features.shape[1])

    def annotations_for(self, sentence_index: int) -> List[SegmentAnnotation]:
        return [a for a in self.annotations if a.sentence_index == sentence_index]

    def match_labels(self) -> np.ndarray:
        """``L_t x L_v`` 0/1 matrix, 1 where the shot is annotated for the sentence."""
        m = np.zeros((self.num_sentences, self.num_shots))
        for a in self.annotations:
            m[a.sentence_index, a.shot_index] = 1.0
        return m

    def frame_positions(self) -> np.ndarray:
        """Absolute frame index of every sampled frame, ``L_v x L_f``."""
        starts = np.array([s.abs_start for s in self.shots], dtype=np.int64)
        return starts[:, None] + np.arange(self.frames_per_shot)[None, :]

    def replace(self, **changes) -> "Sample":
        kw = {f: getattr(self, f) for f in (
            "sample_id", "sentences", "shots", "frames_per_shot", "annotations",
            "text_features", "frame_features")}
        kw.update(changes)
        return Sample(**kw)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.sample_id == other.sample_id
                and self.sentences == other.sentences
                and self.shots == other.shots
                and self.frames_per_shot == other.frames_per_shot
                and self.annotations == other.annotations
                and self.text_features.shape == other.text_features.shape
                and self.frame_features.shape == other.frame_features.shape
                and np.array_equal(self.text_features, other.text_features)
                and np.array_equal(self.frame_features, other.frame_features))

    __hash__ = None  # type: ignore[assignment]


def validate(sample: Sample) -> None:
    """Raise :class:`SampleFormatError` on the first violated invariant."""
    L_f = sample.frames_per_shot
    if not isinstance(L_f, (int, np.integer)) or L_f < 1:
        raise SampleFormatError("Sample.frames_per_shot", f"must be a positive integer, got {L_f!r}")

    for i, s in enumerate(sample.sentences):
        if s.index != i:
            raise SampleFormatError("Sentence.index", f"expected {i}, got {s.index}")
        if s.duration_frames < 0:
            raise SampleFormatError("Sentence.duration_frames", "must be nonnegative")

    prev_end = None
    for j, b in enumerate(sample.shots):
        if b.shot_index != j:
            raise SampleFormatError("ShotBoundary.shot_index", f"expected {j}, got {b.shot_index}")
        if not b.abs_start < b.abs_end:
            raise SampleFormatError("ShotBoundary.abs_end", f"shot {j}: abs_start must be < abs_end")
        if b.abs_start < 0:
            raise SampleFormatError("ShotBoundary.abs_start", f"shot {j}: negative start")
        if b.length != L_f:
            raise SampleFormatError(
                "ShotBoundary.abs_end", f"shot {j}: spans {b.length} frames but frames_per_shot is {L_f}")
        if prev_end is not None and b.abs_start < prev_end:
            raise SampleFormatError("ShotBoundary.abs_start", f"shot {j} overlaps or precedes shot {j - 1}")
        prev_end = b.abs_end

    L_t, L_v = len(sample.sentences), len(sample.shots)
    tf, ff = sample.text_features, sample.frame_features
    if tf.ndim != 2 or tf.shape[0] != L_t:
        raise SampleFormatError("text_features", f"shape {tf.shape} does not match {L_t} sentences")
    if ff.ndim != 3 or ff.shape[:2] != (L_v, L_f):
        raise SampleFormatError("frame_features", f"shape {ff.shape} does not match ({L_v}, {L_f}, d)")
    if tf.shape[1] != ff.shape[2]:
        raise SampleFormatError("frame_features", f"feature dim {ff.shape[2]} != text dim {tf.shape[1]}")
    if not (np.isfinite(tf).all() and np.isfinite(ff).all()):
        raise SampleFormatError("tensors", "non-finite feature values")

    seen_shots: Dict[int, set] = {}
    ranks: Dict[int, List[int]] = {}
    for a in sample.annotations:
        if not 0 <= a.sentence_index < L_t:
            raise SampleFormatError("SegmentAnnotation.sentence_index", f"{a.sentence_index} out of range")
        if not 0 <= a.shot_index < L_v:
            raise SampleFormatError("SegmentAnnotation.shot_index", f"{a.shot_index} out of range")
        if a.start < 0:
            raise SampleFormatError("SegmentAnnotation.start", f"{a.start} is negative")
        if a.end > L_f:
            raise SampleFormatError("SegmentAnnotation.end", f"{a.end} exceeds frames_per_shot {L_f}")
        if not a.start < a.end:
            raise SampleFormatError("SegmentAnnotation.end", f"end {a.end} must exceed start {a.start}")
        shots = seen_shots.setdefault(a.sentence_index, set())
        if a.shot_index in shots:
            raise SampleFormatError("SegmentAnnotation.shot_index",
                                    f"shot {a.shot_index} annotated twice for sentence {a.sentence_index}")
        shots.add(a.shot_index)
        ranks.setdefault(a.sentence_index, []).append(a.rank)
    for i, rs in ranks.items():
        if sorted(rs) != list(range(1, len(rs) + 1)):
            raise SampleFormatError("SegmentAnnotation.rank",
                                    f"sentence {i}: ranks {sorted(rs)} are not a permutation of 1..{len(rs)}")


# ------------------------------------------------------------------ file I/O
def write_tensor(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(array, dtype=_F32LE).tobytes(order="C"))


def read_tensor(path: PathLike, shape: Sequence[int], field: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise SampleFormatError(field, f"missing tensor file {p.name}")
    raw = p.read_bytes()
    n = int(np.prod(shape)) if len(shape) else 1
    if len(raw) != 4 * n:
        raise SampleFormatError(field, f"declared shape {list(shape)} needs {n} floats, file holds {len(raw) / 4:g}")
    return np.frombuffer(raw, dtype=_F32LE).reshape(shape).astype(np.float32)


def dump_json(obj, path: PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def sample_to_manifest(sample: Sample) -> dict:
    return {
        "sample_id": sample.sample_id,
        "sentences": [{"index": s.index, "embedding_ref": s.embedding_ref,
                       "duration_frames": s.duration_frames} for s in sample.sentences],
        "shots": [{"shot_index": b.shot_index, "abs_start": b.abs_start, "abs_end": b.abs_end}
                  for b in sample.shots],
        "frames_per_shot": sample.frames_per_shot,
        "annotations": [{"sentence_index": a.sentence_index, "shot_index": a.shot_index,
                         "start": a.start, "end": a.end, "rank": a.rank} for a in sample.annotations],
        "tensors": [
            {"name": "text_features", "file": "text_features.f32", "dtype": DTYPE_TAG,
             "shape": list(sample.text_features.shape)},
            {"name": "frame_features", "file": "frame_features.f32", "dtype": DTYPE_TAG,
             "shape": list(sample.frame_features.shape)},
        ],
    }


def save_sample(sample: Sample, directory: PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = sample_to_manifest(sample)
    write_tensor(d / "text_features.f32", sample.text_features)
    write_tensor(d / "frame_features.f32", sample.frame_features)
    dump_json(manifest, d / MANIFEST)


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SampleFormatError(f"{where}.{key}", "missing")
    return obj[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SampleFormatError(where, f"expected integer, got {value!r}")
    return value


def load_sample(directory: PathLike) -> Sample:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise SampleFormatError("manifest.json", f"not found in {d}")
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SampleFormatError("manifest.json", f"invalid JSON: {exc}") from None
    if not isinstance(m, dict):
        raise SampleFormatError("manifest.json", "top level must be an object")

    sentences = [Sentence(index=_as_int(_require(s, "index", "Sentence"), "Sentence.index"),
                          embedding_ref=str(_require(s, "embedding_ref", "Sentence")),
                          duration_frames=_as_int(s.get("duration_frames", 0), "Sentence.duration_frames"))
                 for s in _require(m, "sentences", "manifest")]
    shots = [ShotBoundary(shot_index=_as_int(_require(b, "shot_index", "ShotBoundary"), "ShotBoundary.shot_index"),
                          abs_start=_as_int(_require(b, "abs_start", "ShotBoundary"), "ShotBoundary.abs_start"),
                          abs_end=_as_int(_require(b, "abs_end", "ShotBoundary"), "ShotBoundary.abs_end"))
             for b in _require(m, "shots", "manifest")]
    annotations = [SegmentAnnotation(
        **{k: _as_int(_require(a, k, "SegmentAnnotation"), f"SegmentAnnotation.{k}")
           for k in ("sentence_index", "shot_index", "start", "end", "rank")})
        for a in _require(m, "annotations", "manifest")]

    tensors = {}
    for t in _require(m, "tensors", "manifest"):
        name = _require(t, "name", "tensors")
        if _require(t, "dtype", "tensors") != DTYPE_TAG:
            raise SampleFormatError(f"tensors.{name}.dtype", f"unsupported dtype {t['dtype']!r}")
        shape = [_as_int(x, f"tensors.{name}.shape") for x in _require(t, "shape", "tensors")]
        tensors[name] = read_tensor(d / _require(t, "file", "tensors"), shape, name)
    for name in ("text_features", "frame_features"):
        if name not in tensors:
            raise SampleFormatError(name, "not declared in manifest")

    return Sample(
        sample_id=str(_require(m, "sample_id", "manifest")),
        sentences=tuple(sentences),
        shots=tuple(shots),
        frames_per_shot=_as_int(_require(m, "frames_per_shot", "manifest"), "Sample.frames_per_shot"),
        annotations=tuple(annotations),
        text_features=tensors["text_features"],
        frame_features=tensors["frame_features"],
    )


# ------------------------------------------------------------------ timeline
@dataclass(frozen=True)
class TimelineEntry:
    sentence_index: int
    order_in_sentence: int
    shot_index: int
    abs_start: int
    abs_end: int
    score: float


@dataclass
class MontageTimeline:
    entries: List[TimelineEntry] = field(default_factory=list)

    def validate(self, sample: Optional[Sample] = None) -> None:
        keys = [(e.sentence_index, e.order_in_sentence) for e in self.entries]
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise SampleFormatError("MontageTimeline.entries", "not sorted by (sentence_index, order_in_sentence)")
        for e in self.entries:
            if not e.abs_start < e.abs_end:
                raise SampleFormatError("MontageTimeline.abs_end", f"empty range {e}")
            if sample is not None:
                b = sample.shots[e.shot_index]
                if not (b.abs_start <= e.abs_start and e.abs_end <= b.abs_end):
                    raise SampleFormatError("MontageTimeline.abs_start",
                                            f"entry {e} leaves shot [{b.abs_start}, {b.abs_end})")

    def to_json(self) -> list:
        return [{"sentence_index": e.sentence_index, "order_in_sentence": e.order_in_sentence,
                 "shot_index": e.shot_index, "abs_start": e.abs_start, "abs_end": e.abs_end,
                 "score": e.score} for e in self.entries]

    @classmethod
    def from_json(cls, data: Iterable[dict]) -> "MontageTimeline":
        return cls([TimelineEntry(int(d["sentence_index"]), int(d["order_in_sentence"]),
                                  int(d["shot_index"]), int(d["abs_start"]), int(d["abs_end"]),
                                  float(d["score"])) for d in data])

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
