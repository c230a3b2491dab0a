import math

import numpy as np
import pytest

from tvmgi.model import (
    ModelConfig,
    ModelConfigError,
    bind_params,
    forward,
    fusion_layer,
    init_params,
    load_checkpoint,
    param_shapes,
    pool_shots,
    positional_encoding,
    predict_scores,
    project_inputs,
    save_checkpoint,
    self_attention,
    xmha,
)
from tvmgi.numerics import Tape, grad_check


def _weights(rng, d, keys):
    return {k: rng.standard_normal((d, d)) / math.sqrt(d) for k in keys}


def _bind(t, W):
    return {k: t.param(v, k) for k, v in W.items()}


class TestModelConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ModelConfigError, match="n_heads"):
            ModelConfig(d=10, n_heads=4)

    def test_positive_fields(self):
        with pytest.raises(ModelConfigError, match="n_layers"):
            ModelConfig(n_layers=0)

    def test_round_trip(self):
        cfg = ModelConfig(d=32, n_layers=1, n_heads=2, d_in=8)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestPositionalEncoding:
    def test_position_zero(self):
        np.testing.assert_array_equal(positional_encoding(1, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_bounded(self):
        pe = positional_encoding(500, 16)
        assert np.abs(pe).max() <= 1.0

    def test_first_channel_at_one(self):
        assert positional_encoding(2, 4)[1, 0] == pytest.approx(0.84147, abs=1e-5)

    def test_array_positions_match_length_form(self):
        pe = positional_encoding(np.array([[3, 4], [7, 8]]), 8)
        np.testing.assert_array_equal(pe[1, 0], positional_encoding(10, 8)[7])

    def test_odd_width(self):
        assert positional_encoding(3, 5).shape == (3, 5)


class TestProjection:
    def test_identity_projection(self, rng):
        t = Tape()
        d = 4
        P = {"proj.text.w": t.const(np.eye(d)), "proj.text.b": t.const(np.zeros(d)),
             "proj.frame.w": t.const(np.eye(d)), "proj.frame.b": t.const(np.zeros(d))}
        text, frames = rng.standard_normal((2, d)), rng.standard_normal((3, 2, d))
        X, Y = project_inputs(t, P, text, frames)
        np.testing.assert_allclose(X.value, text)
        np.testing.assert_allclose(Y.value, frames)

    def test_zero_input_gives_bias(self, rng):
        t = Tape()
        b = rng.standard_normal(5)
        P = {"proj.text.w": t.const(rng.standard_normal((3, 5))), "proj.text.b": t.const(b),
             "proj.frame.w": t.const(rng.standard_normal((3, 5))), "proj.frame.b": t.const(b)}
        X, _ = project_inputs(t, P, np.zeros((2, 3)), np.zeros((1, 1, 3)))
        np.testing.assert_allclose(X.value, np.tile(b, (2, 1)))

    def test_hand_computed_row(self):
        t = Tape()
        W = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])
        b = np.array([0.5, -0.5])
        P = {"proj.text.w": t.const(W), "proj.text.b": t.const(b),
             "proj.frame.w": t.const(W), "proj.frame.b": t.const(b)}
        X, _ = project_inputs(t, P, np.array([[1.0, 2.0, -1.0]]), np.zeros((1, 1, 3)))
        # [1*1 + 2*0 - 1*3 + 0.5, 1*2 + 2*(-1) - 1*0.5 - 0.5]
        np.testing.assert_allclose(X.value, [[-1.5, -1.0]])


class TestSelfAttention:
    def test_single_token_collapse(self, rng):
        d = 4
        W = _weights(rng, d, ("q", "k", "v", "o"))
        x = rng.standard_normal((1, d))
        t = Tape()
        out = self_attention(t, t.const(x), _bind(t, W), n_heads=2)
        np.testing.assert_allclose(out.value, x + x @ W["v"] @ W["o"], atol=1e-12)

    def test_permutation_equivariance(self, rng):
        d = 8
        W = _weights(rng, d, ("q", "k", "v", "o"))
        x = rng.standard_normal((5, d))
        perm = rng.permutation(5)
        t = Tape()
        out = self_attention(t, t.const(x), _bind(t, W), 2).value
        t2 = Tape()
        out_p = self_attention(t2, t2.const(x[perm]), _bind(t2, W), 2).value
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    @pytest.mark.parametrize("n,d,h", [(1, 4, 1), (3, 8, 2), (7, 12, 3)])
    def test_shape(self, rng, n, d, h):
        t = Tape()
        out = self_attention(t, t.const(rng.standard_normal((n, d))), _bind(t, _weights(rng, d, "qkvo")), h)
        assert out.shape == (n, d)


class TestPoolShots:
    def test_equal_frames(self):
        v = np.array([1.0, -2.0, 3.0])
        t = Tape()
        np.testing.assert_allclose(pool_shots(t, t.const(np.tile(v, (2, 4, 1)))).value, [v, v])

    def test_two_frames(self):
        t = Tape()
        np.testing.assert_allclose(pool_shots(t, t.const([[[1.0, 2.0], [3.0, 4.0]]])).value, [[2.0, 3.0]])

    def test_linearity(self, rng):
        y = rng.standard_normal((3, 4, 5))
        t = Tape()
        a = pool_shots(t, t.const(2.5 * y)).value
        b = 2.5 * pool_shots(t, t.const(y)).value
        np.testing.assert_allclose(a, b, atol=1e-12)


XMHA_KEYS = ("qa", "va", "oa", "qb", "vb", "ob")


class TestXMHA:
    def test_single_pair_collapse(self, rng):
        d = 4
        W = _weights(rng, d, XMHA_KEYS)
        a, b = rng.standard_normal((1, d)), rng.standard_normal((1, d))
        t = Tape()
        out_a, out_b = xmha(t, t.const(a), t.const(b), _bind(t, W), 2)
        np.testing.assert_allclose(out_a.value - a, b @ W["vb"] @ W["oa"], atol=1e-12)
        np.testing.assert_allclose(out_b.value - b, a @ W["va"] @ W["ob"], atol=1e-12)

    @pytest.mark.parametrize("na,nb", [(1, 5), (4, 2), (3, 3)])
    def test_shapes(self, rng, na, nb):
        t = Tape()
        oa, ob = xmha(t, t.const(rng.standard_normal((na, 8))), t.const(rng.standard_normal((nb, 8))),
                      _bind(t, _weights(rng, 8, XMHA_KEYS)), 4)
        assert oa.shape == (na, 8) and ob.shape == (nb, 8)

    def test_gradient_of_both_outputs(self, rng):
        d = 6
        a, b = rng.standard_normal((3, d)), rng.standard_normal((4, d))
        ra, rb = rng.standard_normal((3, d)), rng.standard_normal((4, d))

        def f(t, P):
            oa, ob = xmha(t, t.const(a), t.const(b), P, 2)
            return t.add(t.sum(t.mul(oa, ra)), t.sum(t.mul(ob, rb)))

        report = grad_check(f, _weights(rng, d, XMHA_KEYS))
        assert report.passed, report.worst
        assert set(report.per_param) == set(XMHA_KEYS)


def _layer_inputs(cfg, rng, L_t=2, L_v=3, L_f=4):
    params = init_params(cfg, seed=3)
    return params, rng.standard_normal((L_t, cfg.d)), rng.standard_normal((L_v, L_f, cfg.d))


class TestFusionLayer:
    cfg = ModelConfig(d=8, n_layers=1, n_heads=2, d_in=4)

    def test_shapes(self, rng):
        params, X, Y = _layer_inputs(self.cfg, rng)
        t = Tape()
        P = bind_params(t, params)
        X2, Y2 = fusion_layer(t, P, 0, t.const(X), t.const(Y), self.cfg)
        assert X2.shape == X.shape and Y2.shape == Y.shape

    def test_zero_cross_projections_leave_self_attention(self, rng):
        params, X, Y = _layer_inputs(self.cfg, rng)
        for stage in ("st", "fs", "ft"):
            params[f"layer0.{stage}.oa"] = np.zeros_like(params[f"layer0.{stage}.oa"])
            params[f"layer0.{stage}.ob"] = np.zeros_like(params[f"layer0.{stage}.ob"])
        t = Tape()
        P = bind_params(t, params)
        X2, Y2 = fusion_layer(t, P, 0, t.const(X), t.const(Y), self.cfg)

        def ln(x):
            return t.layer_norm(x, t.const(np.ones(8)), t.const(np.zeros(8)))

        Xs = ln(self_attention(t, t.const(X), {k: P[f"layer0.sa_text.{k}"] for k in "qkvo"}, 2))
        Ys = ln(self_attention(t, t.const(Y.reshape(12, 8)), {k: P[f"layer0.sa_frame.{k}"] for k in "qkvo"}, 2))
        np.testing.assert_allclose(X2.value, Xs.value, atol=1e-4)
        np.testing.assert_allclose(Y2.value.reshape(12, 8), Ys.value, atol=1e-4)

    def test_gradient_through_one_layer(self, rng):
        params, X, Y = _layer_inputs(self.cfg, rng, L_t=2, L_v=2, L_f=3)
        layer = {k: v for k, v in params.items() if k.startswith("layer0.")}
        rx, ry = rng.standard_normal(X.shape), rng.standard_normal(Y.shape)

        def f(t, P):
            X2, Y2 = fusion_layer(t, P, 0, t.const(X), t.const(Y), self.cfg)
            return t.add(t.sum(t.mul(X2, rx)), t.sum(t.mul(Y2, ry)))

        report = grad_check(f, layer)
        assert report.passed, (report.worst, report.max_rel_err)


class TestForward:
    cfg = ModelConfig(d=8, n_layers=2, n_heads=2, d_in=4)

    def _run(self, params, text, frames, cfg=None):
        t = Tape()
        return forward(t, bind_params(t, params), text, frames, cfg or self.cfg)

    def test_zero_match_head_gives_half(self, rng):
        params = init_params(self.cfg)
        params["head.match.text"] = np.zeros_like(params["head.match.text"])
        _, s = self._run(params, rng.standard_normal((2, 4)), rng.standard_normal((3, 5, 4)))
        np.testing.assert_array_equal(s.match.value, np.full((2, 3), 0.5))

    def test_zero_boundary_heads_give_uniform(self, rng):
        params = init_params(self.cfg)
        for h in ("start", "end"):
            params[f"head.{h}.video"] = np.zeros_like(params[f"head.{h}.video"])
        _, s = self._run(params, rng.standard_normal((2, 4)), rng.standard_normal((3, 5, 4)))
        np.testing.assert_allclose(s.start.value, 0.2)
        np.testing.assert_allclose(s.end.value, 0.2)

    def test_score_bundle_invariants(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            out, s = self._run(init_params(self.cfg, seed), 10 * r.uniform(-1, 1, (3, 4)),
                               10 * r.uniform(-1, 1, (4, 6, 4)))
            assert s.match.shape == (3, 4) and s.start.shape == (3, 4, 6)
            assert np.all((s.match.value > 0) & (s.match.value < 1))
            np.testing.assert_allclose(s.start.value.sum(-1), 1.0, atol=1e-5)
            np.testing.assert_allclose(s.end.value.sum(-1), 1.0, atol=1e-5)
            assert all(np.isfinite(v.value).all() for v in (*out, *s))

    def test_shot_output_is_frame_mean(self, rng):
        out, _ = self._run(init_params(self.cfg), rng.standard_normal((2, 4)), rng.standard_normal((3, 5, 4)))
        np.testing.assert_allclose(out.shot_out.value, out.frame_out.value.mean(axis=1), atol=1e-12)

    def test_frame_order_equivariance_without_pe(self, rng):
        cfg = ModelConfig(d=8, n_layers=2, n_heads=2, d_in=4, use_pe=False)
        params = init_params(cfg)
        text, frames = rng.standard_normal((2, 4)), rng.standard_normal((3, 5, 4))
        perm = rng.permutation(5)
        _, s = self._run(params, text, frames, cfg)
        _, sp = self._run(params, text, frames[:, perm], cfg)
        np.testing.assert_allclose(sp.start.value, s.start.value[..., perm], atol=1e-10)
        np.testing.assert_allclose(sp.end.value, s.end.value[..., perm], atol=1e-10)
        np.testing.assert_allclose(sp.match.value, s.match.value, atol=1e-10)

    def test_duplicate_shot_has_equal_scores_without_pe(self, rng):
        cfg = ModelConfig(d=8, n_layers=2, n_heads=2, d_in=4, use_pe=False)
        frames = rng.standard_normal((3, 5, 4))
        frames = np.concatenate([frames, frames[1:2]])
        _, s = self._run(init_params(cfg), rng.standard_normal((2, 4)), frames, cfg)
        np.testing.assert_allclose(s.match.value[:, 1], s.match.value[:, 3], atol=1e-12)

    def test_bad_feature_width(self, rng):
        with pytest.raises(ValueError):
            self._run(init_params(self.cfg), rng.standard_normal((2, 5)), rng.standard_normal((3, 5, 4)))

    def test_predict_scores_matches_recording_tape(self, small_samples):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, d_in=8)
        params = init_params(cfg)
        s = small_samples[0]
        fast = predict_scores(params, s, cfg, dtype=np.float64)
        t = Tape()
        _, slow = forward(t, bind_params(t, params), s.text_features, s.frame_features, cfg, s.frame_positions())
        np.testing.assert_array_equal(fast.match, slow.match.value)


class TestInitAndCheckpoint:
    def test_init_bounds_and_determinism(self):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, d_in=8)
        a, b = init_params(cfg), init_params(cfg)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        w = a["proj.text.w"]
        assert np.abs(w).max() <= 1 / math.sqrt(8)
        assert not a["proj.text.b"].any()
        assert set(a) == set(param_shapes(cfg))

    def test_round_trip(self, tmp_path):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, d_in=8)
        params = init_params(cfg)
        save_checkpoint(params, cfg, tmp_path)
        loaded, cfg2 = load_checkpoint(tmp_path)
        assert cfg2 == cfg
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k].astype(np.float32))

    def test_missing_tensor_is_reported(self, tmp_path):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, d_in=8)
        params = init_params(cfg)
        del params["head.end.video"]
        save_checkpoint(params, cfg, tmp_path)
        with pytest.raises(ValueError, match="head.end.video"):
            load_checkpoint(tmp_path)
