import numpy as np
import pytest
from fdcheck import fd_gradient, rel_error

from hdrtone.errors import CheckpointError
from hdrtone.neural import (
    AdamState,
    CanConfig,
    CanParams,
    LayerSpec,
    Tensor,
    adam_step,
    adaptive_norm,
    can_backward,
    can_forward,
    can_infer,
    conv2d_dilated,
    init_can_params,
    load_checkpoint,
    lrelu,
    save_checkpoint,
)
from hdrtone.neural import engine


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 6, 7))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_allclose(conv2d_dilated(x, w, dilation=1), x, atol=1e-12)

    def test_all_ones_kernel_interior(self):
        c = 0.7
        x = np.full((1, 1, 8, 8), c)
        out = conv2d_dilated(x, np.ones((1, 1, 3, 3)), dilation=1)
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c, rtol=1e-12)
        # zero padding shrinks sums at the border
        np.testing.assert_allclose(out[0, 0, 0, 0], 4 * c, rtol=1e-12)

    def test_dilation_spreads_taps(self):
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        out = conv2d_dilated(x, np.ones((1, 1, 3, 3)), dilation=4)[0, 0]
        hits = np.argwhere(out == 1.0)
        expect = {(r, c) for r in (0, 4, 8) for c in (0, 4, 8)}
        assert {tuple(h) for h in hits} == expect
        assert out.sum() == 9.0

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel"):
            conv2d_dilated(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)))

    def test_1x1_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 1, 1))
        out = conv2d_dilated(x, w)
        ref = np.einsum("oi,nihw->nohw", w[:, :, 0, 0], x)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_bias_added_per_channel(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(
            conv2d_dilated(x, w, bias=b) - conv2d_dilated(x, w),
            b[None, :, None, None] * np.ones((1, 3, 4, 4)), atol=1e-12)

    def test_tiled_and_recorded_paths_agree(self, rng):
        x = rng.standard_normal((1, 4, 20, 13)).astype(np.float64)
        w = rng.standard_normal((5, 4, 3, 3))
        plain = conv2d_dilated(x, w, dilation=2)
        traced = conv2d_dilated(Tensor(x, requires_grad=True), w, dilation=2)
        np.testing.assert_allclose(plain, traced.data, atol=1e-12)


class TestConvGradients:
    def test_finite_difference_all_inputs(self, rng):
        x0 = rng.standard_normal((2, 2, 5, 4))
        w0 = rng.standard_normal((3, 2, 3, 3))
        b0 = rng.standard_normal(3)
        seed_g = rng.standard_normal((2, 3, 5, 4))

        def loss(x, w, b):
            return float((conv2d_dilated(x, w, dilation=2, bias=b) * seed_g).sum())

        xt, wt, bt = (Tensor(a, requires_grad=True) for a in (x0, w0, b0))
        out = conv2d_dilated(xt, wt, dilation=2, bias=bt)
        loss_t = engine.tsum(out * seed_g)
        loss_t.backward()
        assert rel_error(xt.grad, fd_gradient(lambda v: loss(v, w0, b0), x0)) < 1e-6
        assert rel_error(wt.grad, fd_gradient(lambda v: loss(x0, v, b0), w0)) < 1e-6
        assert rel_error(bt.grad, fd_gradient(lambda v: loss(x0, w0, v), b0)) < 1e-6


class TestAdaptiveNorm:
    def test_identity_when_lambda2_zero(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_allclose(adaptive_norm(x, 1.0, 0.0), x, atol=1e-12)

    def test_pure_bn_standardizes(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)) * 3 + 1
        out = adaptive_norm(x, 0.0, 1.0)
        mu = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mu, 0.0, atol=1e-10)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)  # up to the epsilon floor

    def test_constant_channel_keeps_identity_part(self):
        x = np.full((1, 2, 5, 5), 3.0)
        out = adaptive_norm(x, 0.5, 1.0)
        np.testing.assert_allclose(out, 0.5 * 3.0, atol=1e-12)

    def test_bn_term_is_scale_invariant(self, rng):
        # the normalized term has degree zero: BN(a*Z) ~= BN(Z)
        x = rng.standard_normal((1, 2, 6, 6))
        for alpha in (0.25, 4.0):
            np.testing.assert_allclose(adaptive_norm(alpha * x, 0.0, 1.0),
                                       adaptive_norm(x, 0.0, 1.0), rtol=1e-4)


class TestLrelu:
    @pytest.mark.parametrize("z,expect", [(3.0, 3.0), (-1.0, -0.2), (0.0, 0.0)])
    def test_values(self, z, expect):
        assert lrelu(np.array([z]))[0] == pytest.approx(expect)


class TestCanForward:
    def test_zero_input_zero_output(self, rng):
        cfg = CanConfig.tone_mapping()
        params = init_can_params(cfg, rng)
        out = can_infer(np.zeros((1, 1, 10, 10), np.float32), cfg, params)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
    def test_scale_invariance_float32(self, rng, alpha):
        # freshly initialized parameters: identity-start AN keeps the
        # bias-free net exactly positively homogeneous
        cfg = CanConfig.tone_mapping()
        params = init_can_params(cfg, rng)
        x = rng.uniform(-1, 1, (1, 1, 12, 12)).astype(np.float32)
        ref = can_infer(x, cfg, params)
        scaled = can_infer((alpha * x).astype(np.float32), cfg, params)
        denom = np.abs(alpha * ref).max()
        assert np.abs(scaled - alpha * ref).max() / denom < 1e-5

    def test_fusion_head_shape(self, rng):
        cfg = CanConfig.fusion()
        params = init_can_params(cfg, rng)
        out = can_infer(rng.standard_normal((5, 1, 9, 11)).astype(np.float32), cfg, params)
        assert out.shape == (5, 1, 9, 11)

    def test_deterministic_forward(self, rng):
        cfg = CanConfig.fusion()
        params = init_can_params(cfg, rng)
        x = rng.standard_normal((2, 1, 7, 7)).astype(np.float32)
        a = can_infer(x, cfg, params)
        b = can_infer(x, cfg, params)
        assert np.array_equal(a, b)

    def test_forward_and_infer_agree(self, rng):
        cfg = CanConfig.fusion()
        params = init_can_params(cfg, rng)
        x = rng.standard_normal((3, 1, 6, 6)).astype(np.float32)
        out, _ = can_forward(x, cfg, params)
        np.testing.assert_allclose(out.data, can_infer(x, cfg, params), atol=1e-6)


def _toy_cfg():
    return CanConfig(layers=(
        LayerSpec(kernel=3, dilation=1, width=3, bias=False, adaptive_norm=True, lrelu=True),
        LayerSpec(kernel=3, dilation=2, width=1, bias=True, adaptive_norm=False, lrelu=False),
    ), in_channels=1)


def _toy_params(cfg, rng):
    p = init_can_params(cfg, rng, dtype=np.float64)
    for an in p.an:
        if an is not None:
            an[:] = rng.uniform(0.5, 1.5, 2)
    for b in p.biases:
        if b is not None:
            b[:] = rng.standard_normal(b.shape)
    return p


class TestCanBackward:
    def test_finite_difference_over_all_parameters(self, rng):
        cfg = _toy_cfg()
        params = _toy_params(cfg, rng)
        x = rng.standard_normal((1, 1, 4, 4))
        seed_g = rng.standard_normal((1, 1, 4, 4))

        out, state = can_forward(x, cfg, params)
        gx, gp = can_backward(seed_g, state)

        def loss_with(name, idx, arr):
            trial = params.copy()
            getattr(trial, name)[idx][...] = arr
            return float((can_infer(x, cfg, trial) * seed_g).sum())

        for idx in range(2):
            fd = fd_gradient(lambda a, i=idx: loss_with("weights", i, a),
                             params.weights[idx], h_rel=1e-4)
            assert rel_error(gp.weights[idx], fd) < 1e-4
        fd_b = fd_gradient(lambda a: loss_with("biases", 1, a), params.biases[1], h_rel=1e-4)
        assert rel_error(gp.biases[1], fd_b) < 1e-4
        fd_an = fd_gradient(lambda a: loss_with("an", 0, a), params.an[0], h_rel=1e-4)
        assert rel_error(gp.an[0], fd_an) < 1e-4
        fd_x = fd_gradient(lambda v: float((can_infer(v, cfg, params) * seed_g).sum()),
                           x, h_rel=1e-4)
        assert rel_error(gx, fd_x) < 1e-4

    def test_zero_upstream_zero_grads(self, rng):
        cfg = _toy_cfg()
        params = _toy_params(cfg, rng)
        out, state = can_forward(rng.standard_normal((1, 1, 4, 4)), cfg, params)
        gx, gp = can_backward(np.zeros_like(out.data), state)
        assert np.all(gx == 0)
        assert all(np.all(w == 0) for w in gp.weights)

    def test_lambda2_gradient_is_inner_product_with_bn(self, rng):
        # single AN layer: out = lam1*z + lam2*BN(z); d(out.g)/dlam2 = <g, BN(z)>
        z = rng.standard_normal((1, 2, 5, 5))
        g = rng.standard_normal((1, 2, 5, 5))
        lam = Tensor(np.array([1.0, 0.0]), requires_grad=True)
        out = adaptive_norm(Tensor(z), lam[0], lam[1])
        out.backward(g)
        bn = adaptive_norm(z, 0.0, 1.0)
        np.testing.assert_allclose(lam.grad[1], (g * bn).sum(), rtol=1e-10)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = {"w": np.array([1.0, 2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_single_step_algebra(self):
        g = np.array([0.3, -4.0])
        p = {"w": np.zeros(2)}
        adam_step(p, {"w": g.copy()}, AdamState(), lr=1e-2)
        expected = -1e-2 * g / (np.abs(g) + 1e-8)  # bias correction cancels at t=1
        np.testing.assert_allclose(p["w"], expected, rtol=1e-6)

    def test_quadratic_descends(self):
        p = {"x": np.array([1.0])}
        state = AdamState()
        losses = []
        for _ in range(50):
            losses.append(float(p["x"][0] ** 2))
            adam_step(p, {"x": 2 * p["x"]}, state, lr=0.05)
        assert losses[-1] < losses[0]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), lr=0.1)


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        cfg = CanConfig.fusion()
        params = init_can_params(cfg, rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "fusion", [("fuse", cfg, params)], meta={"k": 5})
        kind, nets, meta = load_checkpoint(path, expect_kind="fusion")
        assert kind == "fusion" and meta == {"k": 5}
        cfg2, params2 = nets["fuse"]
        assert cfg2 == cfg
        for (na, a), (nb, b) in zip(params.named_arrays(), params2.named_arrays()):
            assert na == nb
            np.testing.assert_array_equal(a, b)
        manifest = (tmp_path / "model.ckpt.manifest").read_text()
        assert "fuse/layer0.weight" in manifest

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(100))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, rng, tmp_path):
        cfg = CanConfig.fusion()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "fusion", [("fuse", cfg, init_can_params(cfg, rng))])
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 17])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_wrong_kind_rejected(self, rng, tmp_path):
        cfg = CanConfig.fusion()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "fusion", [("fuse", cfg, init_can_params(cfg, rng))])
        with pytest.raises(CheckpointError, match="expected"):
            load_checkpoint(path, expect_kind="tonemap")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
