"""Slow exhaustive re-implementation of the metric suite.

Shares no code with :mod:`tvmgi.evaluation`.  IoU is computed on explicit
frame sets; matching enumerates every one-to-one assignment of predictions
to ground truths and keeps the lexicographically best one, where each
prediction (in rank order) prefers a higher IoU, then a lower ground-truth
index, and any eligible match over none.  That optimum coincides with the
greedy rule, which makes this an oracle for it.  Only usable on tiny inputs.
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

# (start, end, score) and (start, end, rank) tuples, as plain as possible


def frame_iou(a, b) -> float:
    fa, fb = set(range(a[0], a[1])), set(range(b[0], b[1]))
    union = fa | fb
    return len(fa & fb) / len(union) if union else 0.0


def exhaustive_match(preds, gts, thr) -> List[Optional[int]]:
    n, m = len(preds), len(gts)
    table = [[frame_iou(p[:2], g[:2]) for g in gts] for p in preds]
    best_key, best_assign = None, None

    def rec(i, used, assign, key):
        nonlocal best_key, best_assign
        if i == n:
            if best_key is None or key > best_key:
                best_key, best_assign = key, list(assign)
            return
        options = [None] + [j for j in range(m) if j not in used and table[i][j] >= thr]
        for j in options:
            k = (-1.0, 0) if j is None else (table[i][j], -j)
            assign.append(j)
            rec(i + 1, used | ({j} if j is not None else set()), assign, key + (k,))
            assign.pop()

    rec(0, frozenset(), [], ())
    return best_assign if best_assign is not None else []


def ref_r1(sentence_preds, sentence_gts, thr) -> float:
    scored = [(p, g) for p, g in zip(sentence_preds, sentence_gts) if len(g) > 0]
    if not scored:
        return 0.0
    hits = 0
    for preds, gts in scored:
        if len(preds) > 0 and max(frame_iou(preds[0][:2], g[:2]) for g in gts) >= thr:
            hits += 1
    return hits / len(scored)


def ref_ap(preds, gts, thr, k=5) -> Optional[float]:
    if len(gts) == 0:
        return None
    top = list(preds)[:k]
    assign = exhaustive_match(top, gts, thr)
    precisions = []
    for t in range(len(top)):
        if assign[t] is not None:
            hits_so_far = sum(1 for a in assign[: t + 1] if a is not None)
            precisions.append(hits_so_far / (t + 1))
    return sum(precisions) / min(len(gts), k)


def _discounted(rels) -> float:
    total = 0.0
    for pos in range(len(rels)):
        total += rels[pos] / math.log(pos + 2, 2)
    return total


def ref_ndcg(preds, gts, thr, k=5) -> Optional[float]:
    if len(gts) == 0:
        return None
    top = list(preds)[:k]
    assign = exhaustive_match(top, gts, thr)
    gains = [gts[a][2] if a is not None else 0 for a in assign]
    ideal = _discounted(sorted([g[2] for g in gts], reverse=True)[:k])
    return _discounted(gains) / ideal if ideal > 0 else None


def ref_script(sentence_preds, sentence_gts, thr, k=5) -> Optional[Tuple[float, float]]:
    total_gts = sum(len(g) for g in sentence_gts)
    if total_gts == 0:
        return None
    cap = k * len(sentence_gts)
    entries = []
    for s, preds in enumerate(sentence_preds):
        top = list(preds)[:k]
        assign = exhaustive_match(top, sentence_gts[s], thr)
        for pos, p in enumerate(top):
            gain = sentence_gts[s][assign[pos]][2] if assign[pos] is not None else 0
            entries.append(((-p[2], s, pos), assign[pos] is not None, gain))
    entries.sort(key=lambda e: e[0])
    hits, acc = 0, 0.0
    for t, (_, hit, _) in enumerate(entries):
        if hit:
            hits += 1
            acc += hits / (t + 1)
    ap = acc / min(total_gts, cap)
    ideal = _discounted(sorted([g[2] for gts in sentence_gts for g in gts], reverse=True)[:cap])
    return ap, _discounted([e[2] for e in entries]) / ideal


def _avg(values):
    kept = [v for v in values if v is not None]
    return sum(kept) / len(kept) if kept else 0.0


def ref_report(instances, k=5) -> dict:
    """Same keys as ``MetricReport.metric_values()``."""
    sp = [p for preds, _ in instances for p in preds]
    sg = [g for _, gts in instances for g in gts]
    thresholds = [0.3 + 0.05 * i for i in range(14)]
    thresholds = [round(t, 2) for t in thresholds]

    def sent(fn, thr):
        return _avg([fn(p, g, thr, k) for p, g in zip(sp, sg)])

    def script(idx, thr):
        out = []
        for preds, gts in instances:
            r = ref_script(preds, gts, thr, k)
            out.append(None if r is None else r[idx])
        return _avg(out)

    return {
        "r1_05": ref_r1(sp, sg, 0.5),
        "r1_07": ref_r1(sp, sg, 0.7),
        "map5_05": sent(ref_ap, 0.5),
        "map5_075": sent(ref_ap, 0.75),
        "map5_avg": sum(sent(ref_ap, t) for t in thresholds) / 14,
        "ndcg5_05": sent(ref_ndcg, 0.5),
        "ndcg5_075": sent(ref_ndcg, 0.75),
        "script_map5_05": script(0, 0.5),
        "script_map5_075": script(0, 0.75),
        "script_map5_avg": sum(script(0, t) for t in thresholds) / 14,
        "script_ndcg5_05": script(1, 0.5),
        "script_ndcg5_075": script(1, 0.75),
    }
