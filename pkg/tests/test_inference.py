import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_sample
from tvmgi.datamodel import SampleFormatError, SegmentAnnotation
from tvmgi.inference import SegmentPrediction, assemble_montage, localize_in_shot, predict_segments
from tvmgi.model import ScoreBundle, predict_scores

probs = arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 1))


def _bundle(match, L_f=4, seed=0):
    match = np.asarray(match, dtype=np.float64)
    r = np.random.default_rng(seed)
    start = r.dirichlet(np.ones(L_f), size=match.shape)
    end = r.dirichlet(np.ones(L_f), size=match.shape)
    return ScoreBundle(match, start, end)


class TestLocalize:
    def test_ordered_argmaxes(self):
        assert localize_in_shot([0.7, 0.2, 0.1], [0.1, 0.2, 0.7]) == (0, 3)

    def test_tie_prefers_smallest_start(self):
        assert localize_in_shot([0.1, 0.2, 0.7], [0.7, 0.2, 0.1]) == (0, 1)

    def test_single_frame(self):
        assert localize_in_shot([1.0], [1.0]) == (0, 1)

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            localize_in_shot([0.5, 0.5], [1.0])

    @given(st.data())
    @settings(max_examples=100)
    def test_matches_exhaustive_search(self, data):
        ps = data.draw(probs)
        pe = data.draw(arrays(np.float64, ps.shape, elements=st.floats(0, 1)))
        pairs = [(s, e) for s, e in itertools.product(range(ps.size), repeat=2) if s <= e]
        best = min(pairs, key=lambda x: (-(ps[x[0]] + pe[x[1]]), x))
        s, e = localize_in_shot(ps, pe)
        assert s < e
        assert (s, e) == (best[0], best[1] + 1)


class TestPredictSegments:
    def test_order_by_match_score(self):
        preds = predict_segments(_bundle([[0.1, 0.9, 0.5]]))
        assert [p.shot_index for p in preds[0]] == [1, 2, 0]

    def test_fewer_shots_than_k(self):
        assert len(predict_segments(_bundle([[0.1, 0.9, 0.5]]), top_k=5)[0]) == 3

    def test_truncates_to_k(self):
        assert len(predict_segments(_bundle([np.linspace(0, 1, 7)]), top_k=5)[0]) == 5

    def test_ties_broken_by_shot_index(self):
        assert [p.shot_index for p in predict_segments(_bundle([[0.5, 0.7, 0.5]]))[0]] == [1, 0, 2]

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            predict_segments(_bundle([[0.5]]), top_k=0)

    def test_segment_is_localized_per_shot(self):
        b = _bundle([[0.2, 0.8]], L_f=5, seed=3)
        for p in predict_segments(b)[0]:
            assert (p.rel_start, p.rel_end) == localize_in_shot(b.start[0, p.shot_index], b.end[0, p.shot_index])

    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6)), elements=st.floats(0.01, 0.99)))
    def test_invariant_under_monotone_transforms(self, match):
        b = _bundle(match)
        a = predict_segments(b)
        t = predict_segments(b._replace(match=np.log(match) * 3 + 1))
        key = lambda preds: [[(p.shot_index, p.rel_start, p.rel_end) for p in row] for row in preds]
        assert key(a) == key(t)


class TestAssembleMontage:
    def _sample(self):
        return make_sample(n_sentences=2, n_shots=3, L_f=4, origin=100,
                           annotations=[SegmentAnnotation(0, 0, 0, 2, 1), SegmentAnnotation(1, 2, 1, 3, 1)])

    def test_threshold_one_keeps_top_only(self):
        s = self._sample()
        tl = assemble_montage(predict_segments(_bundle([[0.9, 0.8, 0.7], [0.6, 0.2, 0.95]])), s, threshold=1.0)
        assert [(e.sentence_index, e.shot_index) for e in tl.entries] == [(0, 0), (1, 2)]

    def test_low_scores_still_keep_one(self):
        s = self._sample()
        tl = assemble_montage(predict_segments(_bundle([[0.1, 0.2, 0.3], [0.1, 0.1, 0.1]])), s, 0.5)
        assert [e.sentence_index for e in tl.entries] == [0, 1]

    def test_two_per_sentence_sorted(self):
        s = self._sample()
        tl = assemble_montage(predict_segments(_bundle([[0.6, 0.9, 0.1], [0.7, 0.2, 0.8]])), s, 0.5)
        assert [(e.sentence_index, e.order_in_sentence, e.shot_index) for e in tl.entries] == [
            (0, 0, 1), (0, 1, 0), (1, 0, 2), (1, 1, 0)]

    def test_absolute_coordinates_inside_shot(self):
        s = self._sample()
        preds = predict_segments(_bundle(np.random.default_rng(0).uniform(size=(2, 3)), seed=5))
        tl = assemble_montage(preds, s, 0.0)
        assert len(tl.entries) == 6
        for e in tl.entries:
            shot = s.shots[e.shot_index]
            assert shot.abs_start <= e.abs_start < e.abs_end <= shot.abs_end
        p = preds[0][0]
        first = tl.entries[0]
        assert first.abs_start == s.shots[p.shot_index].abs_start + p.rel_start

    def test_empty_predictions_rejected(self):
        with pytest.raises(ValueError):
            assemble_montage([[]], self._sample())

    def test_deterministic_from_model_scores(self, tiny_model, small_samples):
        cfg, params = tiny_model
        s = small_samples[0]
        a = assemble_montage(predict_segments(predict_scores(params, s, cfg)), s)
        b = assemble_montage(predict_segments(predict_scores(params, s, cfg)), s)
        assert a == b
        a.validate(s)

    def test_prediction_outside_shot_fails_validation(self):
        s = self._sample()
        bad = [[SegmentPrediction(0, 0, 0, 9, 0.9, 1.0)], [SegmentPrediction(1, 0, 0, 1, 0.9, 1.0)]]
        with pytest.raises((SampleFormatError, ValueError)):
            assemble_montage(bad, s)
