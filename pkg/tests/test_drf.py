import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import schedule_from_alpha_bars, single_gaussian
from drfsample.bench import TaskSpec, build_toy_model, generate_task
from drfsample.control import ToyControlledStep, controlled_sample
from drfsample.drf import (
    DISTANCE_KINDS,
    WEIGHT_KINDS,
    DRFConfig,
    appearance_loss,
    distance,
    distance_grad,
    drf_hook,
    drf_loss,
    drf_refine,
    fpr_loss,
    fpr_update,
    generation_loss,
    iter_weight,
    noise_update,
    one_step_renoise,
    posterior_mean,
)
from drfsample.errors import ConfigError, DimensionError, NumericError, ScheduleError, StateError
from drfsample.gradcheck import check_instance, random_instance
from drfsample.schedule import forward_diffuse, make_step_grid
from drfsample.score import ScoreModel
from drfsample.trace import RunTrace


class _ConstantEps(ScoreModel):
    """Predicts a fixed noise regardless of input."""

    def __init__(self, eps):
        self.eps = np.asarray(eps, dtype=np.float64)
        self.shape = self.eps.shape

    def predict(self, z, y, t):
        return np.broadcast_to(self.eps, np.shape(z)).copy()


class TestPosteriorMean:
    def test_inverts_forward_diffusion(self, sched):
        rng = np.random.default_rng(0)
        z0, eps = rng.normal(size=(2, 6))
        z_t = forward_diffuse(z0, 400, eps, sched)
        np.testing.assert_allclose(posterior_mean(z_t, eps, 400, sched, "marginal"), z0, atol=1e-12)

    def test_ratio_matched_inverts_one_step_renoise(self, sched):
        rng = np.random.default_rng(1)
        z0, eps = rng.normal(size=(2, 6))
        z = one_step_renoise(z0, 400, 380, eps, sched)
        np.testing.assert_allclose(posterior_mean(z, eps, 400, sched, "ratio_matched", 380), z0, atol=1e-12)

    def test_conjugate_gaussian_oracle(self, sched):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = int(rng.integers(1, 9))
            mu, z = rng.normal(size=(2, d))
            t = int(rng.integers(1, sched.T + 1))
            a = sched.alpha_bar(t)
            got = posterior_mean(z, single_gaussian(mu, sched).predict(z, 0, t), t, sched, "marginal")
            assert np.max(np.abs(got - (math.sqrt(a) * z + (1 - a) * mu))) < 1e-6

    def test_zero_noise_boundary(self, sched):
        z = np.array([1.0, -2.0])
        np.testing.assert_array_equal(posterior_mean(z, np.ones(2), 0, sched, "marginal"), z)

    def test_singular_coefficient(self):
        s = schedule_from_alpha_bars([1.0, 0.5, 0.0])
        with pytest.raises(NumericError):
            posterior_mean(np.zeros(1), np.zeros(1), 2, s, "marginal")

    def test_ratio_mode_needs_t_prev(self, sched):
        with pytest.raises(ConfigError):
            posterior_mean(np.zeros(1), np.zeros(1), 5, sched, "ratio_matched")

    def test_shape_mismatch(self, sched):
        with pytest.raises(DimensionError):
            posterior_mean(np.zeros(2), np.zeros(3), 5, sched)


class TestRenoise:
    def test_scalar_hand_computation(self):
        s = schedule_from_alpha_bars([1.0, 1.0, 0.81])
        out = one_step_renoise(np.array(1.0), 2, 1, np.array(1.0), s)
        assert float(out) == pytest.approx(1.335890, abs=1e-6)

    def test_zero_gap(self, sched):
        z = np.array([0.3, 0.4])
        np.testing.assert_array_equal(one_step_renoise(z, 10, 10, np.ones(2), sched), z)

    def test_zero_noise_scales(self, sched):
        z = np.array([0.3, 0.4])
        np.testing.assert_allclose(one_step_renoise(z, 500, 480, np.zeros(2), sched),
                                   math.sqrt(sched.ratio(500, 480)) * z, rtol=0, atol=1e-15)

    def test_ratio_outside_range(self, sched):
        with pytest.raises(ScheduleError):
            one_step_renoise(np.zeros(1), 10, 20, np.zeros(1), sched)


class TestDistance:
    def test_scalar_evaluation(self):
        assert distance(np.array(1.0), np.array(3.0), "squared_l2_mean") == 4.0
        assert distance(np.array([0.0, 0.0]), np.array([3.0, 4.0]), "l2") == 5.0

    @pytest.mark.parametrize("kind", DISTANCE_KINDS)
    def test_identity_and_symmetry(self, kind):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 7))
        assert distance(a, a, kind) == 0.0
        assert distance(a, b, kind) == distance(b, a, kind)

    @pytest.mark.parametrize("kind", DISTANCE_KINDS)
    def test_gradient_matches_differences(self, kind):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 5))
        h = 1e-6
        fd = np.array([(distance(a + h * e, b, kind) - distance(a - h * e, b, kind)) / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(distance_grad(a, b, kind), fd, atol=1e-7)

    def test_l2_gradient_is_unit_and_zero_at_match(self):
        g = distance_grad(np.array([3.0, 4.0]), np.zeros(2), "l2")
        np.testing.assert_allclose(g, [0.6, 0.8])
        np.testing.assert_array_equal(distance_grad(np.ones(3), np.ones(3), "l2"), np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            distance(np.zeros(2), np.zeros(3))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            distance(np.zeros(2), np.zeros(2), "cosine")


class TestConfig:
    def test_defaults(self):
        c = DRFConfig()
        assert (c.lam, c.rho, c.k, c.N, c.window_skip, c.window_len) == (1.0, 0.001, 5.0, 3, 5, 20)
        assert (c.weight_kind, c.gradient_mode, c.inversion_mode) == ("exponential", "full_vjp", "ratio_matched")

    @pytest.mark.parametrize("field,value", [("lam", -1.0), ("rho", -0.1), ("k", 0.0), ("N", 0),
                                             ("window_len", -1), ("weight_kind", "step"),
                                             ("distance_kind", "huber"), ("gradient_mode", "none")])
    def test_invalid_names_field(self, field, value):
        with pytest.raises(ConfigError) as info:
            DRFConfig(**{field: value})
        assert info.value.field == f"drf.{field}"

    def test_window_must_fit(self, sched):
        DRFConfig().check_grid(make_step_grid(sched, 25))
        with pytest.raises(ConfigError):
            DRFConfig().check_grid(24)


class TestLosses:
    def test_perfect_denoiser_fixed_point(self, sched):
        rng = np.random.default_rng(3)
        z0_a, eps = rng.normal(size=(2, 4))
        cfg = DRFConfig(omega=2.0)
        z_tilde = one_step_renoise(z0_a, 300, 280, eps, sched)
        loss, grad = appearance_loss(z0_a, z_tilde, _ConstantEps(eps), 1, 300, cfg, t_prev=280, eps=eps,
                                     sched=sched)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-6)

    @pytest.mark.parametrize("kind", ["l2", "squared_l2_mean", "l1_mean"])
    @pytest.mark.parametrize("mode", ["full_vjp", "identity_jacobian"])
    def test_one_dimensional_gradients(self, sched, kind, mode):
        rng = np.random.default_rng(4)
        for _ in range(10):
            inst = random_instance(rng, sched, mode, max_dim=1)
            inst.cfg = inst.cfg.with_(distance_kind=kind)
            err, _, _ = check_instance(inst)
            assert err < 1e-4

    def test_appearance_loss_ignores_lambda(self, sched, mixture):
        z0_a, eps = np.array([0.2, 0.1, -0.3]), np.array([1.0, 0.5, -0.5])
        a = appearance_loss(z0_a, None, mixture, 1, 500, DRFConfig(lam=0.1), t_prev=480, eps=eps, sched=sched)
        b = appearance_loss(z0_a, None, mixture, 1, 500, DRFConfig(lam=7.0), t_prev=480, eps=eps, sched=sched)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_appearance_loss_checks_renoised_latent(self, sched, mixture):
        with pytest.raises(StateError):
            appearance_loss(np.zeros(3), np.ones(3), mixture, 1, 500, DRFConfig(), t_prev=480, eps=np.zeros(3),
                            sched=sched)

    def test_generation_fixed_point(self, sched, mixture):
        cfg = DRFConfig(omega=1.0)
        z_tm1, eps = np.array([0.4, -0.4, 1.0]), np.array([0.1, 0.2, 0.3])
        z = one_step_renoise(z_tm1, 500, 480, eps, sched)
        from drfsample.score import cfg_predict

        target = posterior_mean(z, cfg_predict(mixture, z, 0, 500, 1.0), 500, sched, "ratio_matched", 480)
        loss, _ = generation_loss(target, z_tm1, mixture, 0, 500, cfg, t_prev=480, eps=eps, sched=sched)
        assert loss == 0.0

    def test_generation_needs_reference(self, sched, mixture):
        with pytest.raises(StateError):
            generation_loss(None, np.zeros(3), mixture, 0, 500, DRFConfig(), t_prev=480, eps=np.zeros(3),
                            sched=sched, i=1)

    @pytest.mark.parametrize("kind", ["squared_l2_mean", "l1_mean"])
    def test_mean_reduction_invariant_to_duplication(self, sched, kind):
        mu, z_tm1, ref, eps = np.array([0.5]), np.array([0.3]), np.array([-0.2]), np.array([0.7])
        cfg = DRFConfig(distance_kind=kind, omega=0.0)
        one = generation_loss(ref, z_tm1, single_gaussian(mu, sched), 0, 500, cfg, t_prev=480, eps=eps,
                              sched=sched)
        dup = generation_loss(np.tile(ref, 2), np.tile(z_tm1, 2), single_gaussian(np.tile(mu, 2), sched), 0,
                              500, cfg, t_prev=480, eps=np.tile(eps, 2), sched=sched)
        assert dup.value == pytest.approx(one.value, rel=1e-12)


class TestIterWeight:
    @pytest.mark.parametrize("kind", WEIGHT_KINDS)
    @pytest.mark.parametrize("N", [2, 3, 7, 64])
    def test_endpoints(self, kind, N):
        assert iter_weight(0, N, 5.0, kind) == 0.0
        assert abs(iter_weight(N - 1, N, 5.0, kind) - 1.0) < 1e-12

    def test_exponential_mid_value(self):
        assert iter_weight(1, 3, 5.0, "exponential") == pytest.approx(0.275418, abs=1e-5)
        expected = math.sqrt(math.expm1(2.5) / math.expm1(5.0))
        assert iter_weight(1, 3, 5.0, "exponential") == expected

    @pytest.mark.parametrize("kind", WEIGHT_KINDS)
    def test_strictly_increasing(self, kind):
        for N in range(2, 65):
            w = [iter_weight(i, N, 5.0, kind) for i in range(N)]
            assert all(b > a for a, b in zip(w, w[1:]))

    @pytest.mark.parametrize("N", range(3, 28))
    def test_exponential_below_linear_default_k(self, N):
        for i in range(1, N - 1):
            assert iter_weight(i, N, 5.0, "exponential") < iter_weight(i, N, 5.0, "linear")

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 20))
    def test_square_root_exceeds_linear_near_zero(self, k):
        """The square root dominates for tiny i / (N - 1), so the ordering needs moderate N."""
        N = int(10 * math.expm1(k) / k) + 3
        assert iter_weight(1, N, k, "exponential") > iter_weight(1, N, k, "linear")

    def test_single_iteration(self):
        assert iter_weight(0, 1) == 0.0

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            iter_weight(3, 3)


class TestCombination:
    def test_first_iteration_is_appearance_only(self):
        g = np.array([0.5, -1.0])
        out = drf_loss((2.0, g), (4.0, np.array([9.0, 9.0])), 0.0, 0.001)
        assert out.value == 2.0
        np.testing.assert_array_equal(out.grad, g)

    def test_scalar_evaluation(self):
        assert drf_loss((2.0, np.zeros(1)), (4.0, np.zeros(1)), 1.0, 0.001).value == pytest.approx(2.004, abs=1e-12)

    def test_rho_zero_disables_generation(self):
        out = drf_loss((2.0, np.ones(1)), (4.0, np.full(1, 5.0)), 1.0, 0.0)
        assert out.value == 2.0 and out.grad[0] == 1.0

    def test_missing_generation_with_weight(self):
        with pytest.raises(StateError):
            drf_loss((1.0, np.zeros(1)), None, 0.5, 0.1)

    def test_gradient_is_linear_combination(self):
        out = drf_loss((1.0, np.array([1.0])), (2.0, np.array([3.0])), 0.5, 2.0)
        assert out.value == 3.0 and out.grad[0] == 4.0


class TestNoiseUpdate:
    def test_scalar_evaluation(self):
        assert float(noise_update(np.array(1.0), np.array(0.25), 1.0)) == 0.75

    def test_no_ops(self):
        eps = np.array([0.1, 0.2])
        np.testing.assert_array_equal(noise_update(eps, np.ones(2), 0.0), eps)
        np.testing.assert_array_equal(noise_update(eps, np.zeros(2), 3.0), eps)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError):
            noise_update(np.zeros(2), np.array([np.nan, 0.0]), 1.0)

    def test_negative_step(self):
        with pytest.raises(ConfigError):
            noise_update(np.zeros(2), np.zeros(2), -0.5)


class TestRefine:
    def test_single_iteration(self, sched, mixture):
        _, recs = drf_refine(np.ones(3), np.zeros(3), 500, 480, mixture, 1, 0, DRFConfig(N=1), 0, sched=sched)
        assert len(recs) == 1
        assert recs[0]["w"] == 0.0 and recs[0]["L_drf"] == recs[0]["L_app"]

    def test_zero_step_keeps_initial_noise(self, sched, mixture):
        z_tm1 = np.array([0.5, 0.0, -0.5])
        z_star, recs = drf_refine(z_tm1, np.zeros(3), 500, 480, mixture, 1, 0, DRFConfig(lam=0.0), 7, sched=sched)
        eps0 = np.random.default_rng(7).standard_normal(3)
        np.testing.assert_array_equal(z_star, one_step_renoise(z_tm1, 500, 480, eps0, sched))
        assert len({r["eps_digest_gen"] for r in recs}) == 1

    @pytest.mark.parametrize("lam", [0.05, 0.2, 0.5])
    def test_appearance_loss_non_increasing_1d(self, sched, grid, lam):
        mu = np.array([0.8])
        model = single_gaussian(mu, sched)
        cfg = DRFConfig(lam=lam, N=6, omega=0.0, distance_kind="squared_l2_mean")
        for seed, (_, t, t_prev) in enumerate(list(grid.pairs())[:-1]):
            _, recs = drf_refine(np.array([0.1]), mu, t, t_prev, model, 0, 0, cfg, seed, sched=sched)
            l_app = [r["L_app"] for r in recs]
            assert all(b <= a + 1e-15 for a, b in zip(l_app, l_app[1:]))

    def test_deterministic(self, sched, mixture):
        args = (np.ones(3), np.zeros(3), 500, 480, mixture, 1, 0, DRFConfig(N=4, rho=0.5))
        a = drf_refine(*args, 11, sched=sched)
        b = drf_refine(*args, 11, sched=sched)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_shared_noise_between_branches(self, sched, mixture):
        _, recs = drf_refine(np.ones(3), np.zeros(3), 500, 480, mixture, 1, 0, DRFConfig(N=4), 0, sched=sched)
        assert all(r["eps_digest_gen"] == r["eps_digest_app"] for r in recs)
        assert len({r["eps_digest_gen"] for r in recs}) == 4

    def test_record_fields(self, sched, mixture):
        _, recs = drf_refine(np.ones(3), np.zeros(3), 500, 480, mixture, 1, 0, DRFConfig(), 0, sched=sched, step=9)
        assert [r["i"] for r in recs] == [0, 1, 2]
        for key in ("t", "L_app", "L_gen", "w", "L_drf", "eps_norm", "grad_norm"):
            assert all(key in r for r in recs)
        assert recs[1]["w"] == pytest.approx(0.275418, abs=1e-5)
        assert recs[0]["step"] == 9

    def test_numeric_failure_reports_iteration(self, sched):
        class Exploding(ScoreModel):
            shape = (2,)
            calls = 0

            def predict(self, z, y, t):
                Exploding.calls += 1
                return np.full(np.shape(z), np.nan if Exploding.calls > 4 else 0.0)

        with pytest.raises(NumericError) as info:
            drf_refine(np.ones(2), np.zeros(2), 500, 480, Exploding(), 1, 0, DRFConfig(omega=0.0), 0,
                       sched=sched, step=6)
        assert info.value.step == 6 and info.value.iteration is not None


class TestFPR:
    def test_fixed_point(self, sched, mixture):
        cfg = DRFConfig(omega=0.0)
        z_t = np.array([0.1, 0.2, 0.3])
        from drfsample.score import cfg_predict

        target = posterior_mean(z_t, cfg_predict(mixture, z_t, 0, 300, 0.0), 300, sched, "marginal")
        np.testing.assert_allclose(fpr_update(z_t, target, mixture, 0, 300, 1.0, cfg, sched), z_t, atol=1e-12)

    def test_zero_step(self, sched, mixture):
        z_t = np.array([0.1, 0.2, 0.3])
        np.testing.assert_array_equal(fpr_update(z_t, np.zeros(3), mixture, 0, 300, 0.0, DRFConfig(), sched), z_t)

    def test_descent_1d(self, sched):
        rng = np.random.default_rng(8)
        for _ in range(50):
            model = single_gaussian(rng.normal(size=1), sched)
            cfg = DRFConfig(omega=0.0, distance_kind="squared_l2_mean")
            z_t, z0 = rng.normal(size=(2, 1))
            t = int(rng.integers(1, sched.T + 1))
            before = fpr_loss(z_t, z0, model, 0, t, cfg, sched)
            after = fpr_loss(fpr_update(z_t, z0, model, 0, t, 0.01, cfg, sched), z0, model, 0, t, cfg, sched)
            assert after < before


@pytest.fixture(scope="module")
def toy_setup(sched):
    model = build_toy_model(sched)
    _, _, ctx = generate_task(TaskSpec())
    return model, ctx


class TestHook:
    def test_default_window_calls(self, sched, grid, toy_setup):
        model, ctx = toy_setup
        hook = drf_hook(ToyControlledStep(grid), DRFConfig(), seed=0)
        _, trace = controlled_sample(hook, ctx, model, sched, seed=0)
        assert hook.calls == 20
        steps = sorted({r["step"] for r in trace.of_kind("drf_iter")})
        assert steps == list(range(5, 25))
        assert len(trace.of_kind("drf_iter")) == 60

    def test_empty_window_is_bit_identical(self, sched, grid, toy_setup):
        model, ctx = toy_setup
        hook = drf_hook(ToyControlledStep(grid), DRFConfig(window_len=0), seed=0)
        a, trace_a = controlled_sample(hook, ctx, model, sched, seed=3)
        b, trace_b = controlled_sample(ToyControlledStep(grid), ctx, model, sched, seed=3)
        np.testing.assert_array_equal(a, b)
        assert trace_a == trace_b and hook.calls == 0

    def test_full_window(self, sched, toy_setup):
        model, ctx = toy_setup
        g = make_step_grid(sched, 10)
        hook = drf_hook(ToyControlledStep(g), DRFConfig(window_skip=0, window_len=10, N=1), seed=0)
        controlled_sample(hook, ctx, model, sched, seed=0)
        assert hook.calls == 10

    def test_window_must_fit_grid(self, sched):
        with pytest.raises(ConfigError):
            drf_hook(ToyControlledStep(make_step_grid(sched, 20)), DRFConfig())

    def test_deterministic(self, sched, toy_setup):
        model, ctx = toy_setup
        g = make_step_grid(sched, 30)
        runs = [controlled_sample(drf_hook(ToyControlledStep(g), DRFConfig(), seed=4), ctx, model, sched, seed=1,
                                  trace=RunTrace()) for _ in range(2)]
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_active_step_changes_output(self, sched, toy_setup):
        model, ctx = toy_setup
        g = make_step_grid(sched, 30)
        a, _ = controlled_sample(drf_hook(ToyControlledStep(g), DRFConfig(), seed=0), ctx, model, sched, seed=1)
        b, _ = controlled_sample(ToyControlledStep(g), ctx, model, sched, seed=1)
        assert not np.array_equal(a, b)
