"""Tests for parameter fitting: loss, analytic gradients, FD checks, descent.

Gradient correctness is established two independent ways: closed-form
hand calculations on a 1x1 image, and central finite differences on
random instances conditioned to stay away from clamp saturation and
the kinks of the absolute-value loss.
"""

import math

import numpy as np
import pytest

import uwsim.fitting as fitting
from uwsim.fitting import (
    FitConfig,
    FitDivergenceError,
    GradReport,
    LossTrace,
    recon_loss,
    finite_diff_check,
    fit,
    grad_alpha,
    grad_beta,
    grad_bigb,
    grad_theta_f,
    load_manifest,
    write_loss_trace,
    _backprop,
    _fuse_backward_input,
    _lr_at,
)
from uwsim.imaging import DepthMap, RgbImage, save_depth, save_rgb
from uwsim.physics import (
    PhysicalParams,
    SynthesisState,
    _fuse_raw,
    _synthesize_arrays,
    gaussian_kernel,
    identity_filter,
    synthesize,
    synthesize_with_state,
)


def make_state(i_a, i_d, params):
    """Forward pass retaining everything the backward pass needs."""
    kernel = None
    if params.kernel_size > 1:
        kernel = gaussian_kernel(params.q, params.kernel_size)
    raw, con = _synthesize_arrays(
        i_a.data, i_d.data, params.beta, params.alpha, params.big_b, kernel,
        params.theta_f, None,
    )
    clamped = (raw < 0.0) | (raw > 1.0)
    return SynthesisState(
        i_a=i_a.data, i_d=i_d.data, con=con, raw_fused=raw,
        clamped=clamped, params=params,
    ), RgbImage(np.clip(raw, 0.0, 1.0))


class TestFitConfig:
    def test_defaults_valid(self):
        cfg = FitConfig()
        assert cfg.epochs == 200
        assert cfg.w1 == 0.0 and cfg.w2 == 1.0

    def test_rejects_nonpositive_learning_rate(self):
        with pytest.raises(ValueError, match="learning_rate"):
            FitConfig(learning_rate=0.0)
        with pytest.raises(ValueError, match="learning_rate"):
            FitConfig(learning_rate=-1e-3)

    def test_rejects_zero_epochs(self):
        with pytest.raises(ValueError, match="epochs"):
            FitConfig(epochs=0)

    def test_rejects_decay_start_outside_epochs(self):
        with pytest.raises(ValueError, match="decay_start"):
            FitConfig(epochs=10, decay_start=11)
        with pytest.raises(ValueError, match="decay_start"):
            FitConfig(epochs=10, decay_start=-1)


class TestReconLoss:
    def test_identical_images_zero_loss_zero_grad(self):
        rng = np.random.default_rng(0)
        img = RgbImage(rng.random((6, 5, 3)))
        loss, grad = recon_loss(img, img)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_constant_offset(self):
        base = np.full((4, 4, 3), 0.4)
        loss, grad = recon_loss(RgbImage(base + 0.1), RgbImage(base))
        assert loss == pytest.approx(0.1, abs=1e-12)
        np.testing.assert_allclose(grad, 1.0 / base.size, atol=1e-18)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((7, 6, 3))
        b = rng.random((7, 6, 3))
        loss, grad = recon_loss(RgbImage(a), RgbImage(b))

        total = 0.0
        expected = np.zeros_like(a)
        for y in range(7):
            for x in range(6):
                for c in range(3):
                    diff = a[y, x, c] - b[y, x, c]
                    total += abs(diff)
                    expected[y, x, c] = np.sign(diff) / a.size
        assert loss == pytest.approx(total / a.size, rel=1e-12)
        np.testing.assert_allclose(grad, expected, atol=1e-18)

    def test_saturation_mask_zeroes_grad_but_not_loss(self):
        rng = np.random.default_rng(2)
        a = rng.random((5, 5, 3))
        b = rng.random((5, 5, 3))
        mask = rng.random((5, 5, 3)) < 0.3
        loss_plain, grad_plain = recon_loss(RgbImage(a), RgbImage(b))
        loss_masked, grad_masked = recon_loss(RgbImage(a), RgbImage(b), clamped=mask)
        assert loss_masked == loss_plain
        assert np.all(grad_masked[mask] == 0.0)
        np.testing.assert_array_equal(grad_masked[~mask], grad_plain[~mask])

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ in size"):
            recon_loss(RgbImage(np.zeros((4, 4, 3))), RgbImage(np.zeros((4, 5, 3))))


class TestFuseAdjoint:
    def test_adjoint_identity_with_edge_clipping(self):
        # <fuse(con), y> == <con, fuse^T(y)> exactly, for a filter large
        # enough that the replicated border participates.
        rng = np.random.default_rng(3)
        con = rng.standard_normal((5, 4, 6))
        theta = rng.standard_normal((3, 2, 3, 6))
        y = rng.standard_normal((5, 4, 3))
        lhs = float(np.sum(_fuse_raw(con, theta) * y))
        rhs = float(np.sum(con * _fuse_backward_input(y, theta, con.shape)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestAnalyticGradients:
    def test_zero_depth_kills_formation_gradients(self):
        rng = np.random.default_rng(4)
        img = RgbImage(rng.random((6, 6, 3)))
        params = PhysicalParams(beta=0.7, alpha=0.4, big_b=0.5, kernel_size=1)
        state, _ = make_state(img, DepthMap(np.zeros((6, 6))), params)
        dsw = rng.standard_normal((6, 6, 3))
        assert np.all(grad_beta(state, dsw) == 0.0)
        assert np.all(grad_alpha(state, dsw) == 0.0)
        assert np.all(grad_bigb(state, dsw) == 0.0)
        # the filter gradient has no depth factor and stays live
        assert np.any(grad_theta_f(state, dsw) != 0.0)

    def test_zero_upstream_gradient_kills_everything(self):
        rng = np.random.default_rng(5)
        img = RgbImage(rng.random((5, 5, 3)))
        depth = DepthMap(rng.random((5, 5)))
        params = PhysicalParams(beta=0.7, alpha=0.4, big_b=0.5)
        state, _ = make_state(img, depth, params)
        g = _backprop(state, np.zeros((5, 5, 3)))
        for part in g:
            assert np.all(part == 0.0)

    def test_zero_backscatter_brightness_kills_alpha(self):
        rng = np.random.default_rng(6)
        img = RgbImage(rng.random((5, 5, 3)))
        depth = DepthMap(rng.random((5, 5)))
        params = PhysicalParams(beta=0.7, alpha=0.4, big_b=0.0, kernel_size=1)
        state, _ = make_state(img, depth, params)
        dsw = rng.standard_normal((5, 5, 3))
        assert np.all(grad_alpha(state, dsw) == 0.0)
        assert np.any(grad_bigb(state, dsw) != 0.0)

    def test_zero_alpha_kills_brightness_gradient(self):
        rng = np.random.default_rng(7)
        img = RgbImage(rng.random((5, 5, 3)))
        depth = DepthMap(rng.random((5, 5)))
        params = PhysicalParams(beta=0.7, alpha=0.0, big_b=0.5, kernel_size=1)
        state, _ = make_state(img, depth, params)
        dsw = rng.standard_normal((5, 5, 3))
        assert np.all(grad_bigb(state, dsw) == 0.0)

    def test_missing_state_rejected(self):
        with pytest.raises(ValueError, match="state"):
            _backprop(None, np.zeros((2, 2, 3)))

    def test_one_pixel_closed_form(self):
        # 1x1 image, depth 1, no forward scatter, channel-identity filter:
        # every stage of the chain is computable by hand.
        i_a = np.array([[[0.8, 0.6, 0.4]]])
        params = PhysicalParams(beta=0.5, alpha=0.3, big_b=0.4, kernel_size=1)
        state, out = make_state(RgbImage(i_a), DepthMap(np.ones((1, 1))), params)

        i_add = i_a[0, 0] * math.exp(-0.5) + 0.4 * (1 - math.exp(-0.3))
        np.testing.assert_allclose(out.data[0, 0], i_add, atol=1e-15)

        target = RgbImage(np.full((1, 1, 3), 0.3))
        _, dsw = recon_loss(out, target, state.clamped)
        np.testing.assert_allclose(dsw, 1.0 / 3.0, atol=1e-15)

        np.testing.assert_allclose(
            grad_beta(state, dsw), -i_a[0, 0] * math.exp(-0.5) / 3.0, atol=1e-15
        )
        np.testing.assert_allclose(
            grad_alpha(state, dsw), 0.4 * math.exp(-0.3) / 3.0 * np.ones(3), atol=1e-15
        )
        np.testing.assert_allclose(
            grad_bigb(state, dsw), (1 - math.exp(-0.3)) / 3.0 * np.ones(3), atol=1e-15
        )
        g_theta = grad_theta_f(state, dsw)
        assert g_theta.shape == (3, 1, 1, 3)
        for lam in range(3):
            np.testing.assert_allclose(g_theta[lam, 0, 0], i_add / 3.0, atol=1e-15)


def conditioned_instance(rng, height=8, width=8, kernel_size=5):
    """Random instance whose loss surface is locally smooth.

    Rejects draws whose pre-clamp output comes within 1e-3 of the clamp
    bounds, then offsets the target away from the synthesized image so
    no |.| kink or clamp crossing sits within finite-difference reach.
    """
    for _ in range(100):
        params = PhysicalParams(
            beta=rng.uniform(0.05, 2.0, 3),
            alpha=rng.uniform(0.05, 2.0, 3),
            big_b=rng.uniform(0.1, 0.9, 3),
            q=rng.uniform(5.0, 7.0),
            kernel_size=kernel_size,
        )
        img = RgbImage(rng.random((height, width, 3)))
        depth = DepthMap(rng.random((height, width)))
        state, out = make_state(img, depth, params)
        margin = np.minimum(np.abs(state.raw_fused), np.abs(1.0 - state.raw_fused))
        if margin.min() < 1e-3:
            continue
        delta = rng.uniform(0.05, 0.5, out.data.shape)
        target = out.data + np.where(out.data < 0.5, delta, -delta)
        return (img, depth, RgbImage(target)), params
    raise AssertionError("failed to draw a margin-conditioned instance")


class TestFiniteDiffCheck:
    def test_step_size_bounds_enforced(self):
        rng = np.random.default_rng(8)
        (pair, params) = conditioned_instance(rng)
        with pytest.raises(ValueError, match="h must lie"):
            finite_diff_check(pair, params, h=1e-7)
        with pytest.raises(ValueError, match="h must lie"):
            finite_diff_check(pair, params, h=0.1)

    def test_zero_depth_zero_loss_is_exact(self):
        # With depth identically zero the image passes through untouched,
        # so loss, analytic gradients, and central differences all vanish
        # identically and the report passes with zero error.
        rng = np.random.default_rng(9)
        img = RgbImage(rng.random((6, 6, 3)))
        depth = DepthMap(np.zeros((6, 6)))
        params = PhysicalParams(beta=0.8, alpha=0.6, big_b=0.5, kernel_size=1)
        report = finite_diff_check((img, depth, img), params)
        assert report.max_rel_error == 0.0
        assert report.passed()
        names = [e.name for e in report.entries]
        assert "beta[0]" in names and "theta_f[0,0,0,2]" in names
        assert len(names) == 9 + 9

    def test_zero_loss_at_depth_sits_on_kink(self):
        # When the target equals the synthesized image at nonzero depth,
        # every pixel sits exactly on the |.| kink: the subgradient is 0
        # but central differences pick up the second-order curvature term
        # -mean(I_a e^{-d beta} d^2) h / 2, so the check must fail. This
        # is why FD verification requires targets offset from the output.
        rng = np.random.default_rng(10)
        img = RgbImage(rng.random((6, 6, 3)) * 0.5 + 0.25)
        depth = DepthMap(np.ones((6, 6)))
        params = PhysicalParams(beta=0.8, alpha=0.6, big_b=0.5, kernel_size=1)
        _, out = make_state(img, depth, params)
        report = finite_diff_check((img, depth, out), params)
        beta_entries = [e for e in report.entries if e.name.startswith("beta")]
        assert all(e.analytic == 0.0 for e in beta_entries)
        assert all(abs(e.finite_diff) > 1e-8 for e in beta_entries)
        assert not report.passed()

    def test_random_conditioned_instances_pass(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            pair, params = conditioned_instance(rng)
            report = finite_diff_check(pair, params)
            assert report.passed(1e-4), (
                f"max rel error {report.max_rel_error:.3e}"
            )

    def test_corrupted_gradient_is_caught(self, monkeypatch):
        # The checker must actually be sensitive: flipping the sign of the
        # analytic gradients has to break it.
        rng = np.random.default_rng(12)
        pair, params = conditioned_instance(rng)
        true_backprop = fitting._backprop

        def flipped(state, dsw):
            return tuple(-g for g in true_backprop(state, dsw))

        monkeypatch.setattr(fitting, "_backprop", flipped)
        report = finite_diff_check(pair, params)
        assert not report.passed(1e-4)

    def test_entry_count_covers_every_scalar(self):
        rng = np.random.default_rng(13)
        pair, params = conditioned_instance(rng)
        report = finite_diff_check(pair, params)
        expected = 3 + 3 + 3 + params.theta_f.size
        assert len(report.entries) == expected


class TestLrSchedule:
    def test_flat_then_linear_decay(self):
        cfg = FitConfig(learning_rate=1.0, epochs=4, decay_start=2)
        assert [_lr_at(cfg, e) for e in range(4)] == [1.0, 1.0, 1.0, 0.5]

    def test_decay_start_equal_epochs_is_constant(self):
        cfg = FitConfig(learning_rate=0.3, epochs=5, decay_start=5)
        assert [_lr_at(cfg, e) for e in range(5)] == [0.3] * 5

    def test_decay_from_zero(self):
        cfg = FitConfig(learning_rate=1.0, epochs=4, decay_start=0)
        assert [_lr_at(cfg, e) for e in range(4)] == [1.0, 0.75, 0.5, 0.25]


class TestFit:
    def make_pairs(self, rng, n=2, size=6, params=None):
        params = params or PhysicalParams(
            beta=[0.7, 1.0, 0.55], alpha=[0.5, 0.6, 0.45],
            big_b=[0.65, 0.75, 0.7], kernel_size=1,
        )
        pairs = []
        for _ in range(n):
            img = RgbImage(rng.random((size, size, 3)))
            depth = DepthMap(rng.random((size, size)) * 2.0)
            pairs.append((img, depth, synthesize(img, depth, params)))
        return pairs, params

    def test_empty_pairs_rejected(self):
        init = PhysicalParams(beta=0.5, alpha=0.5, big_b=0.5)
        with pytest.raises(ValueError, match="at least one"):
            fit([], init)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(14)
        img = RgbImage(rng.random((4, 4, 3)))
        depth = DepthMap(rng.random((4, 5)))
        init = PhysicalParams(beta=0.5, alpha=0.5, big_b=0.5)
        with pytest.raises(ValueError, match="dimensions differ"):
            fit([(img, depth, img)], init, FitConfig(epochs=1, decay_start=1))

    def test_perfect_start_is_a_fixed_point(self):
        rng = np.random.default_rng(15)
        pairs, params = self.make_pairs(rng)
        trace = fit(pairs, params, FitConfig(learning_rate=0.5, epochs=5, decay_start=5))
        assert np.all(trace.losses == 0.0)
        np.testing.assert_array_equal(trace.final_params.beta, params.beta)
        np.testing.assert_array_equal(trace.final_params.alpha, params.alpha)
        np.testing.assert_array_equal(trace.final_params.big_b, params.big_b)
        np.testing.assert_array_equal(trace.final_params.theta_f, params.theta_f)

    def test_single_step_matches_hand_computation(self):
        i_a = np.array([[[0.8, 0.6, 0.4]]])
        init = PhysicalParams(beta=0.5, alpha=0.3, big_b=0.4, kernel_size=1)
        target = RgbImage(np.full((1, 1, 3), 0.3))
        pair = (RgbImage(i_a), DepthMap(np.ones((1, 1))), target)

        lr = 0.01
        trace = fit([pair], init, FitConfig(learning_rate=lr, epochs=1, decay_start=1))

        i_add = i_a[0, 0] * math.exp(-0.5) + 0.4 * (1 - math.exp(-0.3))
        expected_loss = np.mean(np.abs(i_add - 0.3))
        assert trace.final_loss == pytest.approx(expected_loss, rel=1e-12)

        g_beta = -i_a[0, 0] * math.exp(-0.5) / 3.0
        g_alpha = 0.4 * math.exp(-0.3) / 3.0
        g_bigb = (1 - math.exp(-0.3)) / 3.0
        fp = trace.final_params
        np.testing.assert_allclose(fp.beta, 0.5 - lr * g_beta, atol=1e-15)
        np.testing.assert_allclose(fp.alpha, 0.3 - lr * g_alpha, atol=1e-15)
        np.testing.assert_allclose(fp.big_b, 0.4 - lr * g_bigb, atol=1e-15)
        for lam in range(3):
            expected_theta = identity_filter()[lam, 0, 0] - lr * i_add / 3.0
            np.testing.assert_allclose(fp.theta_f[lam, 0, 0], expected_theta, atol=1e-15)

    def test_loss_weight_rescales_like_learning_rate(self):
        rng = np.random.default_rng(16)
        pairs, _ = self.make_pairs(rng)
        init = PhysicalParams(beta=0.4, alpha=0.4, big_b=0.4, kernel_size=1)
        t1 = fit(pairs, init, FitConfig(learning_rate=0.02, epochs=1, decay_start=1, w2=2.0))
        t2 = fit(pairs, init, FitConfig(learning_rate=0.04, epochs=1, decay_start=1, w2=1.0))
        assert t1.final_loss == pytest.approx(2.0 * t2.final_loss, rel=1e-12)
        np.testing.assert_allclose(t1.final_params.beta, t2.final_params.beta, atol=1e-15)
        np.testing.assert_allclose(t1.final_params.big_b, t2.final_params.big_b, atol=1e-15)

    def test_saturation_mask_changes_updates_when_clamp_active(self):
        rng = np.random.default_rng(17)
        img = RgbImage(rng.random((5, 5, 3)) * 0.5 + 0.5)
        depth = DepthMap(np.ones((5, 5)))
        # doubled channel filter pushes the pre-clamp output above 1
        init = PhysicalParams(
            beta=0.2, alpha=1.0, big_b=0.8, kernel_size=1,
            theta_f=2.0 * identity_filter(),
        )
        _, state = synthesize_with_state(img, depth, init)
        assert np.any(state.clamped)
        target = RgbImage(np.full((5, 5, 3), 0.2))
        pair = [(img, depth, target)]
        cfg_on = FitConfig(learning_rate=0.1, epochs=1, decay_start=1, saturation_mask=True)
        cfg_off = FitConfig(learning_rate=0.1, epochs=1, decay_start=1, saturation_mask=False)
        on = fit(pair, init, cfg_on).final_params
        off = fit(pair, init, cfg_off).final_params
        assert np.any(on.beta != off.beta) or np.any(on.theta_f != off.theta_f)

    def test_frozen_filter_stays_fixed(self):
        rng = np.random.default_rng(18)
        pairs, _ = self.make_pairs(rng)
        init = PhysicalParams(beta=0.4, alpha=0.4, big_b=0.4, kernel_size=1)
        trace = fit(pairs, init, FitConfig(learning_rate=0.1, epochs=3, decay_start=3,
                                           fit_theta_f=False))
        np.testing.assert_array_equal(trace.final_params.theta_f, init.theta_f)

    def test_projection_keeps_parameters_feasible(self):
        rng = np.random.default_rng(19)
        pairs, _ = self.make_pairs(rng)
        init = PhysicalParams(beta=0.05, alpha=0.05, big_b=0.95, kernel_size=1)
        trace = fit(pairs, init, FitConfig(learning_rate=100.0, epochs=8, decay_start=4))
        fp = trace.final_params
        assert np.all(fp.beta >= 0.0) and np.all(fp.alpha >= 0.0)
        assert np.all(fp.big_b >= 0.0) and np.all(fp.big_b <= 1.0)
        assert np.all(np.isfinite(trace.losses))

    def test_nonfinite_forward_pass_aborts(self, monkeypatch):
        rng = np.random.default_rng(20)
        pairs, _ = self.make_pairs(rng, n=1)

        def poisoned(*args, **kwargs):
            raw, con = _synthesize_arrays(*args, **kwargs)
            return np.full_like(raw, np.nan), con

        monkeypatch.setattr(fitting, "_synthesize_arrays", poisoned)
        init = PhysicalParams(beta=0.5, alpha=0.5, big_b=0.5, kernel_size=1)
        with pytest.raises(FitDivergenceError, match="non-finite"):
            fit(pairs, init, FitConfig(epochs=1, decay_start=1))

    def test_trace_rejects_nonfinite_losses(self):
        params = PhysicalParams(beta=0.5, alpha=0.5, big_b=0.5)
        with pytest.raises(ValueError, match="finite"):
            LossTrace(
                epochs=np.array([0]), learning_rates=np.array([0.1]),
                losses=np.array([np.nan]), final_params=params,
            )

    def test_recovers_parameters_from_banded_depths(self):
        # Reduced version of the full recovery setup: textures paired with
        # sparse banded depth maps (most pixels at depth zero carry no
        # formation gradient, which keeps the descent floor low while the
        # informative bands spread sensitivity across all three channels).
        true = PhysicalParams(
            beta=[0.7, 1.0, 0.55], alpha=[0.5, 0.6, 0.45],
            big_b=[0.65, 0.75, 0.7], kernel_size=1,
        )
        bands = np.array([[0.2, 0.6], [0.9, 1.5], [2.0, 3.0], [4.5, 7.0]])
        rng = np.random.default_rng(123)
        pairs = []
        for _ in range(8):
            img = RgbImage(rng.random((24, 24, 3)))
            flat = np.zeros(24 * 24)
            order = rng.permutation(flat.size)
            pos = 0
            for lo, hi in bands:
                sel = order[pos:pos + 18]
                flat[sel] = lo + rng.random(18) * (hi - lo)
                pos += 18
            depth = DepthMap(flat.reshape(24, 24))
            pairs.append((img, depth, synthesize(img, depth, true)))

        pert = np.random.default_rng(7)
        jitter = lambda v: v * (1 + pert.uniform(-0.3, 0.3, np.shape(v)))
        init = PhysicalParams(
            beta=jitter(true.beta), alpha=jitter(true.alpha),
            big_b=np.clip(jitter(true.big_b), 0.0, 1.0), kernel_size=1,
        )
        cfg = FitConfig(learning_rate=1.0, epochs=150, decay_start=30,
                        fit_theta_f=False)
        trace = fit(pairs, init, cfg)
        fp = trace.final_params
        rel = max(
            np.abs(fp.beta / true.beta - 1.0).max(),
            np.abs(fp.alpha / true.alpha - 1.0).max(),
            np.abs(fp.big_b / true.big_b - 1.0).max(),
        )
        assert rel < 0.1
        assert trace.final_loss < 5e-4
        assert trace.final_loss < trace.losses[0] / 20.0


class TestManifest:
    def write_pair_files(self, tmp_path, rng, idx):
        img = RgbImage(rng.random((4, 4, 3)))
        depth = DepthMap(rng.random((4, 4)))
        target = RgbImage(rng.random((4, 4, 3)))
        save_rgb(img, str(tmp_path / f"rgb{idx}.ppm"))
        save_depth(depth, str(tmp_path / f"depth{idx}.pfm"))
        save_rgb(target, str(tmp_path / f"target{idx}.ppm"))
        return {"rgb": f"rgb{idx}.ppm", "depth": f"depth{idx}.pfm",
                "target": f"target{idx}.ppm"}

    def test_round_trip_with_relative_paths(self, tmp_path):
        import json

        rng = np.random.default_rng(21)
        entries = [self.write_pair_files(tmp_path, rng, i) for i in range(2)]
        manifest = tmp_path / "pairs.json"
        manifest.write_text(json.dumps({"pairs": entries}))
        pairs = load_manifest(str(manifest))
        assert len(pairs) == 2
        for img, depth, target in pairs:
            assert img.data.shape == (4, 4, 3)
            assert depth.data.shape == (4, 4)
            assert target.data.shape == (4, 4, 3)

    def test_top_level_list_accepted(self, tmp_path):
        import json

        rng = np.random.default_rng(22)
        entries = [self.write_pair_files(tmp_path, rng, 0)]
        manifest = tmp_path / "pairs.json"
        manifest.write_text(json.dumps(entries))
        assert len(load_manifest(str(manifest))) == 1

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(str(tmp_path / "nope.json"))

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ValueError, match="malformed manifest"):
            load_manifest(str(bad))

    def test_empty_manifest_rejected(self, tmp_path):
        empty = tmp_path / "empty.json"
        empty.write_text('{"pairs": []}')
        with pytest.raises(ValueError, match="at least one"):
            load_manifest(str(empty))

    def test_missing_field_rejected(self, tmp_path):
        import json

        bad = tmp_path / "pairs.json"
        bad.write_text(json.dumps({"pairs": [{"rgb": "a.ppm", "depth": "d.pfm"}]}))
        with pytest.raises(ValueError, match="entry 0"):
            load_manifest(str(bad))


class TestWriteLossTrace:
    def test_csv_round_trips_exactly(self, tmp_path):
        params = PhysicalParams(beta=0.5, alpha=0.5, big_b=0.5)
        trace = LossTrace(
            epochs=np.array([0, 1]),
            learning_rates=np.array([0.1, 0.05]),
            losses=np.array([0.25, 0.125]),
            final_params=params,
        )
        out = tmp_path / "trace.csv"
        write_loss_trace(trace, str(out))
        lines = out.read_text().splitlines()
        assert lines[0] == "epoch,lr,loss"
        assert len(lines) == 3
        for line, (e, lr, loss) in zip(lines[1:], [(0, 0.1, 0.25), (1, 0.05, 0.125)]):
            cols = line.split(",")
            assert int(cols[0]) == e
            assert float(cols[1]) == lr
            assert float(cols[2]) == loss
