"""From scores to ranked segments and an assembled montage timeline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .datamodel import MontageTimeline, Sample, TimelineEntry, rel_to_abs
from .model import ScoreBundle


@dataclass(frozen=True)
class SegmentPrediction:
    sentence_index: int
    shot_index: int
    rel_start: int
    rel_end: int
    match_score: float
    boundary_score: float


def localize_in_shot(p_start: Sequence[float], p_end: Sequence[float]) -> Tuple[int, int]:
    """Best ``(start, end)`` half-open segment maximising ``p_start[s] + p_end[e]``.

    ``e`` is the last included frame and must satisfy ``s <= e``.  A single
    left-to-right scan keeps the best start seen so far.  Ties prefer the
    smallest start, then the smallest end.
    """
    ps = np.asarray(p_start, dtype=np.float64)
    pe = np.asarray(p_end, dtype=np.float64)
    if ps.shape != pe.shape or ps.ndim != 1 or ps.size == 0:
        raise ValueError(f"start/end distributions must be equal-length vectors, got {ps.shape}, {pe.shape}")
    best_s = 0
    best = (-np.inf, 0, 0)
    for e in range(ps.size):
        if ps[e] > ps[best_s]:
            best_s = e
        score = ps[best_s] + pe[e]
        if score > best[0] or (score == best[0] and (best_s, e) < best[1:]):
            best = (score, best_s, e)
    return best[1], best[2] + 1


def predict_segments(scores: ScoreBundle, top_k: int = 5) -> List[List[SegmentPrediction]]:
    """Per sentence, one localized candidate per shot ranked by matching score.

    Ties in the matching score are broken by shot index.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    match = np.asarray(scores.match)
    start = np.asarray(scores.start)
    end = np.asarray(scores.end)
    L_t, L_v = match.shape
    out = []
    for i in range(L_t):
        order = sorted(range(L_v), key=lambda k: (-float(match[i, k]), k))[:top_k]
        preds = []
        for k in order:
            s, e = localize_in_shot(start[i, k], end[i, k])
            preds.append(SegmentPrediction(i, k, s, e, float(match[i, k]),
                                           float(start[i, k, s]) + float(end[i, k, e - 1])))
        out.append(preds)
    return out


def assemble_montage(predictions: Sequence[Sequence[SegmentPrediction]], sample: Sample,
                     threshold: float = 0.5) -> MontageTimeline:
    """Keep predictions scoring at least ``threshold`` (the top one always
    survives), play them in descending score order, sentences in script order."""
    entries = []
    for i, preds in enumerate(predictions):
        if not preds:
            raise ValueError(f"sentence {i} has no predictions")
        ranked = sorted(preds, key=lambda p: (-p.match_score, p.shot_index))
        kept = [ranked[0]] + [p for p in ranked[1:] if p.match_score >= threshold]
        for order, p in enumerate(kept):
            shot = sample.shots[p.shot_index]
            abs_start = rel_to_abs(shot, p.rel_start)
            abs_end = rel_to_abs(shot, p.rel_end - 1) + 1
            entries.append(TimelineEntry(p.sentence_index, order, p.shot_index, abs_start, abs_end,
                                         p.match_score))
    timeline = MontageTimeline(sorted(entries, key=lambda e: (e.sentence_index, e.order_in_sentence)))
    timeline.validate(sample)
    return timeline
