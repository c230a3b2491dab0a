"""Sentence- and script-level retrieval metrics for montage predictions.

Segments are half-open absolute frame intervals, so segments from
different shots never overlap.  A prediction counts as a hit at threshold
``thr`` when ``IoU >= thr``.  Matching is greedy in rank order: each
prediction claims the unmatched ground truth with the highest IoU (lowest
index on ties), and each ground truth is claimed at most once.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .datamodel import Sample
from .inference import SegmentPrediction, predict_segments
from .model import ModelConfig, predict_scores

TOP_K = 5
AVG_THRESHOLDS = tuple(round(0.3 + 0.05 * i, 2) for i in range(14))


class Candidate(NamedTuple):
    start: int
    end: int
    score: float


class Truth(NamedTuple):
    start: int
    end: int
    rank: int


SentencePreds = Sequence[Candidate]
SentenceTruths = Sequence[Truth]


def iou(a: Tuple[int, int], b: Tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def match_predictions(preds: SentencePreds, gts: SentenceTruths, thr: float
                      ) -> Tuple[List[bool], List[Optional[int]]]:
    taken = [False] * len(gts)
    flags: List[bool] = []
    matched: List[Optional[int]] = []
    for p in preds:
        best, best_iou = None, -1.0
        for g_idx, g in enumerate(gts):
            if taken[g_idx]:
                continue
            v = iou((p.start, p.end), (g.start, g.end))
            if v >= thr and v > best_iou:
                best, best_iou = g_idx, v
        if best is not None:
            taken[best] = True
        flags.append(best is not None)
        matched.append(best)
    return flags, matched


def recall_at_1(sentence_preds: Sequence[SentencePreds], sentence_gts: Sequence[SentenceTruths],
                thr: float) -> float:
    hits = total = 0
    for preds, gts in zip(sentence_preds, sentence_gts):
        if not gts:
            continue
        total += 1
        if preds and any(iou((preds[0].start, preds[0].end), (g.start, g.end)) >= thr for g in gts):
            hits += 1
    return hits / total if total else 0.0


def _ap(flags: Sequence[bool], n_gts: int, cap: int) -> float:
    tp, acc = 0, 0.0
    for t, hit in enumerate(flags, start=1):
        if hit:
            tp += 1
            acc += tp / t
    return acc / min(n_gts, cap)


def average_precision_at_5(preds: SentencePreds, gts: SentenceTruths, thr: float,
                           k: int = TOP_K) -> Optional[float]:
    """AP over the top ``k`` predictions, normalised by ``min(|gts|, k)``.

    Returns ``None`` for a sentence without ground truth.
    """
    if not gts:
        return None
    flags, _ = match_predictions(preds[:k], gts, thr)
    return _ap(flags, len(gts), k)


def _dcg(rels: Sequence[float]) -> float:
    return sum(r / math.log2(t + 1) for t, r in enumerate(rels, start=1))


def ndcg_at_5(preds: SentencePreds, gts: SentenceTruths, thr: float, k: int = TOP_K) -> Optional[float]:
    """NDCG with the matched ground truth's rank as relevance (0 if unmatched)."""
    if not gts:
        return None
    ideal = _dcg(sorted((g.rank for g in gts), reverse=True)[:k])
    if ideal <= 0:
        return None
    _, matched = match_predictions(preds[:k], gts, thr)
    return _dcg([gts[m].rank if m is not None else 0 for m in matched]) / ideal


def pool_script(sentence_preds: Sequence[SentencePreds], k: int = TOP_K) -> List[Tuple[int, Candidate]]:
    """Concatenate each sentence's top ``k`` and re-rank globally by score.

    Ties keep sentence order, then within-sentence order.
    """
    pooled = [(i, pos, p) for i, preds in enumerate(sentence_preds) for pos, p in enumerate(preds[:k])]
    pooled.sort(key=lambda x: (-x[2].score, x[0], x[1]))
    return [(i, p) for i, _, p in pooled]


def script_level_metrics(sentence_preds: Sequence[SentencePreds], sentence_gts: Sequence[SentenceTruths],
                         thr: float, k: int = TOP_K) -> Optional[Tuple[float, float]]:
    """(AP, NDCG) over the pooled script list; predictions only match GTs of their own sentence.

    The pooled list holds up to ``k`` entries per sentence, so AP is
    normalised by ``min(|all gts|, k * n_sentences)`` and the ideal DCG
    uses the top ``k * n_sentences`` ground-truth ranks.
    """
    n_gts = sum(len(g) for g in sentence_gts)
    if n_gts == 0:
        return None
    cap = k * len(sentence_gts)
    pooled = pool_script(sentence_preds, k)
    taken = [[False] * len(g) for g in sentence_gts]
    flags, rels = [], []
    for i, p in pooled:
        gts = sentence_gts[i]
        best, best_iou = None, -1.0
        for g_idx, g in enumerate(gts):
            if taken[i][g_idx]:
                continue
            v = iou((p.start, p.end), (g.start, g.end))
            if v >= thr and v > best_iou:
                best, best_iou = g_idx, v
        if best is not None:
            taken[i][best] = True
        flags.append(best is not None)
        rels.append(gts[best].rank if best is not None else 0)
    ideal = _dcg(sorted((g.rank for gts in sentence_gts for g in gts), reverse=True)[:cap])
    return _ap(flags, n_gts, cap), _dcg(rels) / ideal


# ------------------------------------------------------------------ reports
@dataclass(frozen=True)
class MetricReport:
    r1_05: float
    r1_07: float
    map5_05: float
    map5_075: float
    map5_avg: float
    ndcg5_05: float
    ndcg5_075: float
    script_map5_05: float
    script_map5_075: float
    script_map5_avg: float
    script_ndcg5_05: float
    script_ndcg5_075: float
    n_sentences: int = 0
    n_scripts: int = 0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def metric_values(self) -> Dict[str, float]:
        d = self.to_dict()
        d.pop("n_sentences")
        d.pop("n_scripts")
        return d

    def table(self) -> str:
        """Grid in the usual R1 / mAP@5 / NDCG@5 / script-level layout (x100)."""
        head1 = ["R1", "", "mAP@5", "", "", "NDCG@5", "", "mAP@5+", "", "", "NDCG@5+", ""]
        head2 = ["@0.5", "@0.7", "@0.5", "@0.75", "avg", "@0.5", "@0.75",
                 "@0.5", "@0.75", "avg", "@0.5", "@0.75"]
        vals = [self.r1_05, self.r1_07, self.map5_05, self.map5_075, self.map5_avg,
                self.ndcg5_05, self.ndcg5_075, self.script_map5_05, self.script_map5_075,
                self.script_map5_avg, self.script_ndcg5_05, self.script_ndcg5_075]
        cells = [f"{100 * v:.2f}" for v in vals]
        w = 8
        lines = ["".join(h.ljust(w) for h in head1), "".join(h.ljust(w) for h in head2),
                 "".join(c.ljust(w) for c in cells)]
        return "\n".join(line.rstrip() for line in lines) + "\n(+ = script level)"


Instance = Tuple[Sequence[SentencePreds], Sequence[SentenceTruths]]


def _mean(values: Sequence[Optional[float]]) -> float:
    kept = [v for v in values if v is not None]
    return sum(kept) / len(kept) if kept else 0.0


def report_from_instances(instances: Sequence[Instance], k: int = TOP_K) -> MetricReport:
    """Aggregate metrics over scripts; sentence metrics average over sentences."""
    sp = [p for preds, _ in instances for p in preds]
    sg = [g for _, gts in instances for g in gts]

    def sent_ap(thr):
        return _mean([average_precision_at_5(p, g, thr, k) for p, g in zip(sp, sg)])

    def sent_ndcg(thr):
        return _mean([ndcg_at_5(p, g, thr, k) for p, g in zip(sp, sg)])

    def script(thr):
        res = [script_level_metrics(p, g, thr, k) for p, g in instances]
        return (_mean([r[0] if r else None for r in res]), _mean([r[1] if r else None for r in res]))

    s05, s075 = script(0.5), script(0.75)
    return MetricReport(
        r1_05=recall_at_1(sp, sg, 0.5),
        r1_07=recall_at_1(sp, sg, 0.7),
        map5_05=sent_ap(0.5),
        map5_075=sent_ap(0.75),
        map5_avg=sum(sent_ap(t) for t in AVG_THRESHOLDS) / len(AVG_THRESHOLDS),
        ndcg5_05=sent_ndcg(0.5),
        ndcg5_075=sent_ndcg(0.75),
        script_map5_05=s05[0],
        script_map5_075=s075[0],
        script_map5_avg=sum(script(t)[0] for t in AVG_THRESHOLDS) / len(AVG_THRESHOLDS),
        script_ndcg5_05=s05[1],
        script_ndcg5_075=s075[1],
        n_sentences=sum(1 for g in sg if g),
        n_scripts=len(instances),
    )


# --------------------------------------------------------- sample adapters
def ground_truths(sample: Sample) -> List[List[Truth]]:
    out: List[List[Truth]] = [[] for _ in sample.sentences]
    for a in sample.annotations:
        base = sample.shots[a.shot_index].abs_start
        out[a.sentence_index].append(Truth(base + a.start, base + a.end, a.rank))
    return out


def to_candidates(sample: Sample, predictions: Sequence[Sequence[SegmentPrediction]]) -> List[List[Candidate]]:
    return [[Candidate(sample.shots[p.shot_index].abs_start + p.rel_start,
                       sample.shots[p.shot_index].abs_start + p.rel_end, p.match_score)
             for p in preds] for preds in predictions]


def oracle_candidates(sample: Sample) -> List[List[Candidate]]:
    """Ground-truth segments scored by their rank (earliest first)."""
    return [sorted((Candidate(g.start, g.end, float(g.rank)) for g in gts), key=lambda c: -c.score)
            for gts in ground_truths(sample)]


def shot_candidates(sample: Sample, shots: Sequence[int]) -> List[List[Candidate]]:
    """Whole-shot predictions restricted to ``shots`` for every sentence."""
    cands = [Candidate(sample.shots[j].abs_start, sample.shots[j].abs_end, 1.0 - 0.01 * n)
             for n, j in enumerate(shots)]
    return [list(cands[:TOP_K]) for _ in sample.sentences]


def model_instance(params, cfg: ModelConfig, sample: Sample, top_k: int = TOP_K) -> Instance:
    preds = predict_segments(predict_scores(params, sample, cfg), top_k)
    return to_candidates(sample, preds), ground_truths(sample)


def evaluate(samples: Sequence[Sample], params, cfg: ModelConfig, top_k: int = TOP_K,
             threads: int = 1) -> MetricReport:
    def one(s):
        return model_instance(params, cfg, s, top_k)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            instances = list(ex.map(one, samples))
    else:
        instances = [one(s) for s in samples]
    return report_from_instances(instances, top_k)


def evaluate_oracle(samples: Sequence[Sample], top_k: int = TOP_K) -> MetricReport:
    return report_from_instances([(oracle_candidates(s), ground_truths(s)) for s in samples], top_k)


# ---------------------------------------------------------- random baseline
def _hit_fraction(L_f: int, rel: Tuple[int, int], thr: float) -> float:
    """Share of all L_f(L_f+1)/2 segments of a shot with IoU >= thr against ``rel``."""
    hits = total = 0
    for s in range(L_f):
        for e in range(s + 1, L_f + 1):
            total += 1
            hits += iou((s, e), rel) >= thr
    return hits / total


def random_baseline(samples: Sequence[Sample], thr: float = 0.5, k: int = TOP_K) -> Dict[str, float]:
    """Expected sentence-level R1 and NDCG@k of a uniformly random predictor.

    The predictor ranks the shots by a uniform random permutation and picks a
    uniformly random segment inside each.  Because a prediction can only
    overlap ground truth of its own shot, both expectations are exact sums
    over the annotated shots.
    """
    r1, ndcg = [], []
    for s in samples:
        L_v, L_f = s.num_shots, s.frames_per_shot
        slot = sum(1.0 / math.log2(t + 1) for t in range(1, min(k, L_v) + 1)) / L_v
        for i in range(s.num_sentences):
            anns = s.annotations_for(i)
            if not anns:
                continue
            q = [_hit_fraction(L_f, (a.start, a.end), thr) for a in anns]
            r1.append(sum(q) / L_v)
            ideal = _dcg(sorted((a.rank for a in anns), reverse=True)[:k])
            ndcg.append(sum(a.rank * qa for a, qa in zip(anns, q)) * slot / ideal)
    return {"r1": float(np.mean(r1)) if r1 else 0.0, "ndcg": float(np.mean(ndcg)) if ndcg else 0.0}
