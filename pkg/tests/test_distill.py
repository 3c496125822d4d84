import csv

import numpy as np
import pytest

from distill_lab.distill import (
    EditProblem,
    affine_generator,
    dds_grad,
    identity_generator,
    optimize,
    pds_grad,
    pds_grad_latent_form,
    pds_objective,
    resolve_weight,
    sds_grad,
    write_trajectory_csv,
)
from distill_lab.latentops import SharedNoiseDraw, forward_sample, sample_shared_noise, stochastic_latent
from distill_lab.denoiser import Denoiser, cfg_predict, _layer_views
from distill_lab.schedule import build_subsequence, pds_coeffs, posterior_coeffs


def constant_model(eps: np.ndarray) -> Denoiser:
    d = Denoiser.create(seed=0)
    w, b = _layer_views(d.params, d.arch)[-1]
    w[:] = 0.0
    b[:] = np.asarray(eps, dtype=float)
    return d


def rough_model(rng, hidden=(16, 16)) -> Denoiser:
    d = Denoiser.create(num_classes=2, t_embed_dim=4, hidden=hidden, seed=0)
    d.params[:] = 0.7 * rng.standard_normal(d.params.size)
    return d


def make_problem(rng, sub, gen_point=None, src_point=None, y_src=1, y_tgt=2, omega=7.5):
    src = np.asarray(src_point if src_point is not None else rng.standard_normal(2), dtype=float)
    tgt = np.asarray(gen_point if gen_point is not None else rng.standard_normal(2), dtype=float)
    return EditProblem(
        x0_src=src, y_src=y_src, gen=identity_generator(tgt), y_tgt=y_tgt, omega=omega, sub=sub
    )


class TestGenerators:
    def test_identity_render_and_pullback(self):
        gen = identity_generator(np.array([1.0, -2.0]))
        assert np.array_equal(gen.render(), [1.0, -2.0])
        v = np.array([0.3, 0.4])
        assert np.array_equal(gen.pullback(v), v)

    def test_affine_render(self, rng):
        a = rng.standard_normal((2, 2))
        b = rng.standard_normal(2)
        u = rng.standard_normal(2)
        gen = affine_generator(a, b, u)
        assert gen.render() == pytest.approx(a @ u + b, rel=1e-15)

    @pytest.mark.parametrize("kind", ["identity", "affine"])
    def test_pullback_matches_render_finite_differences(self, kind, rng):
        if kind == "identity":
            gen = identity_generator(rng.standard_normal(2))
        else:
            gen = affine_generator(
                rng.standard_normal((2, 2)), rng.standard_normal(2), rng.standard_normal(2)
            )
        h = 1e-6
        jac = np.empty((2, gen.theta.size))
        for j in range(gen.theta.size):
            gen.theta[j] += h
            up = gen.render()
            gen.theta[j] -= 2 * h
            dn = gen.render()
            gen.theta[j] += h
            jac[:, j] = (up - dn) / (2 * h)
        analytic = np.vstack([gen.pullback(np.eye(2)[k]) for k in range(2)])
        assert np.linalg.norm(analytic - jac) / np.linalg.norm(jac) < 1e-6

    def test_affine_pullback_contracts_cotangent(self, rng):
        # adjoint identity: <J v, w> == <v, J^T w> for random directions
        gen = affine_generator(
            rng.standard_normal((2, 2)), rng.standard_normal(2), rng.standard_normal(2)
        )
        w = rng.standard_normal(2)
        v = rng.standard_normal(6)
        jac = np.vstack([gen.pullback(np.eye(2)[k]) for k in range(2)])
        assert (jac @ v) @ w == pytest.approx(v @ gen.pullback(w), rel=1e-12)


class TestSdsGrad:
    def test_oracle_prediction_gives_zero(self, schedule, subsequence, rng):
        eps = rng.standard_normal(2)
        d = constant_model(eps)
        draw = SharedNoiseDraw(i=200, eps_prev=np.zeros(2), eps_cur=eps)
        gen = identity_generator(rng.standard_normal(2))
        grad = sds_grad(gen, 1, draw, d, 1.0, 1.0, schedule, subsequence)
        assert np.all(grad == 0.0)

    def test_identity_pullback_passes_residual(self, schedule, subsequence, rng):
        d = rough_model(rng)
        draw = sample_shared_noise(subsequence, rng)
        gen = identity_generator(rng.standard_normal(2))
        t = int(subsequence.tau[draw.i])
        x_t = forward_sample(gen.render(), t, draw.eps_cur, schedule)
        expected = 2.5 * (cfg_predict(d, x_t, 2, t, 3.0) - draw.eps_cur)
        got = sds_grad(gen, 2, draw, d, 3.0, 2.5, schedule, subsequence)
        assert np.array_equal(got, expected)

    def test_on_distribution_residuals_shrink(self, trained_model, schedule, subsequence, dataset):
        rng = np.random.default_rng(44)
        m2 = np.asarray(dataset.class_params[1].mean)

        def mean_norm(point):
            gen = identity_generator(np.asarray(point, dtype=float))
            total = 0.0
            for _ in range(100):
                draw = sample_shared_noise(subsequence, rng)
                total += np.linalg.norm(
                    sds_grad(gen, 2, draw, trained_model, 1.0, 1.0, schedule, subsequence)
                )
            return total / 100

        assert mean_norm(m2) < mean_norm(m2 + np.array([5.0, 3.0]))


class TestDdsGrad:
    def test_exact_zero_at_identity(self, schedule, subsequence, rng):
        for _ in range(20):
            d = rough_model(rng)
            x0 = rng.standard_normal(2)
            prob = make_problem(rng, subsequence, gen_point=x0, src_point=x0, y_src=1, y_tgt=1)
            draw = sample_shared_noise(subsequence, rng)
            grad = dds_grad(prob, draw, d, 1.0, schedule)
            assert np.all(grad == 0.0)

    def test_swapping_roles_negates_residual(self, schedule, subsequence, rng):
        d = rough_model(rng)
        a, b = rng.standard_normal(2), rng.standard_normal(2)
        draw = sample_shared_noise(subsequence, rng)
        fwd = dds_grad(make_problem(rng, subsequence, gen_point=b, src_point=a, y_src=1, y_tgt=2),
                       draw, d, 1.0, schedule)
        rev = dds_grad(make_problem(rng, subsequence, gen_point=a, src_point=b, y_src=2, y_tgt=1),
                       draw, d, 1.0, schedule)
        assert np.array_equal(fwd, -rev)

    def test_residual_equals_two_direct_predictions(self, schedule, subsequence, rng):
        d = rough_model(rng)
        prob = make_problem(rng, subsequence, omega=4.0)
        draw = sample_shared_noise(subsequence, rng)
        t = int(subsequence.tau[draw.i])
        x_t_tgt = forward_sample(prob.gen.render(), t, draw.eps_cur, schedule)
        x_t_src = forward_sample(prob.x0_src, t, draw.eps_cur, schedule)
        expected = cfg_predict(d, x_t_tgt, prob.y_tgt, t, 4.0) - cfg_predict(
            d, x_t_src, prob.y_src, t, 4.0
        )
        assert np.array_equal(dds_grad(prob, draw, d, 1.0, schedule), expected)


class TestPdsGrad:
    def test_exact_zero_at_identity(self, schedule, subsequence, rng):
        for _ in range(20):
            d = rough_model(rng)
            x0 = rng.standard_normal(2)
            prob = make_problem(rng, subsequence, gen_point=x0, src_point=x0, y_src=2, y_tgt=2)
            draw = sample_shared_noise(subsequence, rng)
            assert np.all(pds_grad(prob, draw, d, schedule) == 0.0)

    def test_condition_blind_model_leaves_pure_attraction(self, schedule, subsequence, rng):
        # constant predictions erase the prediction difference, leaving
        # psi * (x0_tgt - x0_src) through the pullback
        d = constant_model(np.array([0.2, -0.4]))
        prob = make_problem(rng, subsequence)
        draw = sample_shared_noise(subsequence, rng)
        coeffs = pds_coeffs(schedule, prob.sub, draw.i)
        expected = coeffs.psi * (prob.gen.render() - prob.x0_src)
        assert pds_grad(prob, draw, d, schedule) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("stride", [2, 5, 10])
    def test_equals_latent_form(self, schedule, stride, rng):
        sub = build_subsequence(schedule, stride, 0.02, 0.98)
        worst = 0.0
        for _ in range(30):
            d = rough_model(rng)
            prob = make_problem(rng, sub, omega=float(rng.uniform(0, 8)))
            draw = sample_shared_noise(sub, rng)
            g1 = pds_grad(prob, draw, d, schedule)
            g2 = pds_grad_latent_form(prob, draw, d, schedule)
            worst = max(worst, np.linalg.norm(g1 - g2) / max(np.linalg.norm(g1), 1e-300))
        assert worst < 1e-8

    def test_consecutive_grid_gives_identically_zero_gradient(self, schedule, rng):
        # psi = chi = 0 on a stride-1 grid, so the gradient vanishes even
        # for distinct source/target pairs
        sub1 = build_subsequence(schedule, 1, 0.02, 0.98)
        for _ in range(10):
            d = rough_model(rng)
            prob = make_problem(rng, sub1)
            draw = sample_shared_noise(sub1, rng)
            assert np.all(pds_grad(prob, draw, d, schedule) == 0.0)

    def test_exactly_invariant_to_predecessor_noise(self, schedule, subsequence, rng):
        d = rough_model(rng)
        prob = make_problem(rng, subsequence)
        base = sample_shared_noise(subsequence, rng)
        grads = []
        for _ in range(3):
            draw = SharedNoiseDraw(i=base.i, eps_prev=rng.standard_normal(2), eps_cur=base.eps_cur)
            grads.append(pds_grad(prob, draw, d, schedule))
        assert np.array_equal(grads[0], grads[1])
        assert np.array_equal(grads[0], grads[2])

    def test_predecessor_contribution_cancels_in_latent_difference(
        self, trained_model, schedule, subsequence, rng
    ):
        x_src, x_tgt = np.array([-2.0, 0.3]), np.array([0.5, 0.1])
        base = sample_shared_noise(subsequence, rng)
        diffs = []
        for _ in range(3):
            draw = SharedNoiseDraw(i=base.i, eps_prev=rng.standard_normal(2), eps_cur=base.eps_cur)
            z_tgt = stochastic_latent(x_tgt, 2, draw, trained_model, 7.5, schedule, subsequence)
            z_src = stochastic_latent(x_src, 1, draw, trained_model, 7.5, schedule, subsequence)
            diffs.append(z_tgt - z_src)
        assert np.max(np.abs(diffs[0] - diffs[1])) < 1e-9
        assert np.max(np.abs(diffs[0] - diffs[2])) < 1e-9


class TestPdsObjective:
    def test_zero_at_identity(self, schedule, subsequence, rng):
        d = rough_model(rng)
        x0 = rng.standard_normal(2)
        prob = make_problem(rng, subsequence, gen_point=x0, src_point=x0, y_src=1, y_tgt=1)
        draw = sample_shared_noise(subsequence, rng)
        assert pds_objective(prob, draw, d, schedule) == 0.0

    def test_nonnegative(self, schedule, subsequence, rng):
        for _ in range(20):
            d = rough_model(rng)
            prob = make_problem(rng, subsequence)
            draw = sample_shared_noise(subsequence, rng)
            assert pds_objective(prob, draw, d, schedule) >= 0.0

    def test_matches_expanded_recomputation(self, schedule, subsequence, rng):
        # direct recomputation: sigma^-2 || (x_prev diff) - (mu diff) ||^2
        from distill_lab.latentops import posterior_mean_pred

        d = rough_model(rng)
        prob = make_problem(rng, subsequence, omega=3.0)
        draw = sample_shared_noise(subsequence, rng)
        t_cur = int(subsequence.tau[draw.i])
        t_prev = int(subsequence.tau[draw.i - 1])
        pc = posterior_coeffs(schedule, t_cur)
        x_tgt = prob.gen.render()
        xp_t = forward_sample(x_tgt, t_prev, draw.eps_prev, schedule)
        xp_s = forward_sample(prob.x0_src, t_prev, draw.eps_prev, schedule)
        xc_t = forward_sample(x_tgt, t_cur, draw.eps_cur, schedule)
        xc_s = forward_sample(prob.x0_src, t_cur, draw.eps_cur, schedule)
        mu_t = posterior_mean_pred(xc_t, prob.y_tgt, t_cur, d, 3.0, schedule)
        mu_s = posterior_mean_pred(xc_s, prob.y_src, t_cur, d, 3.0, schedule)
        diff = (xp_t - xp_s) - (mu_t - mu_s)
        expected = float(diff @ diff) / pc.sigma**2
        assert pds_objective(prob, draw, d, schedule) == pytest.approx(expected, rel=1e-9)

    def test_frozen_prediction_gradient_matches_residual(self, schedule, subsequence, rng):
        d = rough_model(rng)
        x_tgt = rng.standard_normal(2)
        prob = make_problem(rng, subsequence, gen_point=x_tgt, omega=2.0)
        draw = sample_shared_noise(subsequence, rng)
        residual = pds_grad(prob, draw, d, schedule)
        t_cur = int(subsequence.tau[draw.i])
        t_prev = int(subsequence.tau[draw.i - 1])
        pc = posterior_coeffs(schedule, t_cur)
        x_t_base = forward_sample(x_tgt, t_cur, draw.eps_cur, schedule)
        eps_frozen = cfg_predict(d, x_t_base, prob.y_tgt, t_cur, 2.0)
        z_src = stochastic_latent(prob.x0_src, prob.y_src, draw, d, 2.0, schedule, subsequence)

        def frozen(x):
            x_prev = forward_sample(x, t_prev, draw.eps_prev, schedule)
            x_cur = forward_sample(x, t_cur, draw.eps_cur, schedule)
            ab = schedule.alpha_bar[t_cur]
            est = (x_cur - np.sqrt(1 - ab) * eps_frozen) / np.sqrt(ab)
            z_tgt = (x_prev - (pc.gamma * est + pc.delta * x_cur)) / pc.sigma
            diff = z_tgt - z_src
            return float(diff @ diff)

        h = 1e-5
        fd = np.array(
            [
                (frozen(x_tgt + h * np.eye(2)[j]) - frozen(x_tgt - h * np.eye(2)[j])) / (2 * h)
                for j in range(2)
            ]
        )
        assert np.linalg.norm(residual - fd) / np.linalg.norm(fd) < 1e-4


class TestOptimize:
    def test_zero_steps_records_initial_state_only(self, trained_model, schedule, subsequence, rng):
        prob = make_problem(rng, subsequence, gen_point=[-2.0, 0.0], src_point=[-2.0, 0.0])
        rec = optimize(prob, "pds", 0, 0.01, 5, trained_model, schedule)
        assert len(rec.steps) == 1
        assert rec.steps[0].step == 0
        assert rec.steps[0].grad_norm == 0.0
        assert not rec.diverged

    def test_identical_seeds_identical_records(self, trained_model, schedule, subsequence, rng):
        prob = make_problem(rng, subsequence, gen_point=[-2.0, 0.1], src_point=[-2.0, 0.1])
        a = optimize(prob, "dds", 25, 0.01, 99, trained_model, schedule)
        b = optimize(prob, "dds", 25, 0.01, 99, trained_model, schedule)
        for ra, rb in zip(a.steps, b.steps):
            assert np.array_equal(ra.theta, rb.theta)
            assert ra.grad_norm == rb.grad_norm

    def test_does_not_mutate_input_problem(self, trained_model, schedule, subsequence, rng):
        start = np.array([-2.0, 0.1])
        prob = make_problem(rng, subsequence, gen_point=start, src_point=start)
        optimize(prob, "sds", 10, 0.05, 1, trained_model, schedule)
        assert np.array_equal(prob.gen.theta, start)

    def test_divergence_flags_partial_record(self, trained_model, schedule, subsequence, rng):
        # an update large enough to overflow theta must stop the run
        prob = make_problem(rng, subsequence, gen_point=[-2.0, 0.0], src_point=[-2.0, 0.0])
        with np.errstate(over="ignore", invalid="ignore"):
            rec = optimize(prob, "sds", 50, 1e308, 3, trained_model, schedule)
        assert rec.diverged
        assert len(rec.steps) < 51

    def test_non_finite_prediction_flags_partial_record(self, schedule, subsequence, rng):
        bad = Denoiser.create(seed=1)
        bad.params[:] = np.nan
        prob = make_problem(rng, subsequence, gen_point=[-2.0, 0.0], src_point=[1.0, 1.0])
        rec = optimize(prob, "dds", 10, 0.01, 3, bad, schedule)
        assert rec.diverged
        assert len(rec.steps) == 1

    def test_adam_option_runs(self, trained_model, schedule, subsequence, rng):
        prob = make_problem(rng, subsequence, gen_point=[-2.0, 0.0], src_point=[-2.0, 0.0])
        rec = optimize(prob, "pds", 20, 0.05, 7, trained_model, schedule, optimizer="adam")
        assert len(rec.steps) == 21
        assert not rec.diverged

    def test_rejects_unknown_objective(self, trained_model, schedule, subsequence, rng):
        prob = make_problem(rng, subsequence)
        with pytest.raises(ValueError):
            optimize(prob, "vsd", 5, 0.01, 1, trained_model, schedule)


class TestWeightsAndCsv:
    def test_weight_modes(self, schedule):
        assert resolve_weight("const", schedule, 500) == 1.0
        assert resolve_weight("one_minus_alpha_bar", schedule, 500) == pytest.approx(
            1.0 - schedule.alpha_bar[500]
        )
        with pytest.raises(ValueError):
            resolve_weight("quadratic", schedule, 500)

    def test_trajectory_csv_layout(self, trained_model, schedule, subsequence, rng, tmp_path):
        prob = make_problem(rng, subsequence, gen_point=[-1.8, 0.2], src_point=[-1.8, 0.2])
        rec = optimize(prob, "pds", 5, 0.01, 11, trained_model, schedule)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(rec, path)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "theta0", "theta1", "x0_tgt_x", "x0_tgt_y", "grad_norm"]
        assert len(rows) == 7
        # 17-significant-digit floats reparse exactly
        for text, value in zip(rows[3][1:3], rec.steps[2].theta):
            assert float(text) == value
