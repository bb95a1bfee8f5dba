import numpy as np
import pytest

from rfsos.belief import integrate_belief
from rfsos.beta_algebra import BetaBasis, quadrature_oracle
from rfsos.optim import SGD, Adam, make_optimizer
from rfsos.quadratic_forms import log_det_pd
from rfsos.rf_cde import uniform_model
from rfsos.training import (
    CDE_FROZEN,
    CDE_KEYS,
    INIT_FROZEN,
    INIT_KEYS,
    TrainConfig,
    TrainingError,
    _loss_initial_impl,
    build_cde,
    clamp_shapes,
    fd_gradient,
    grad_loss_cde,
    init_belief_params,
    init_cde_params,
    loss_and_grad_cde,
    loss_and_grad_initial,
    loss_cde,
    loss_initial,
    regularization,
    train_cde,
    train_initial,
)

from conftest import cde_gradient_probe, grad_rel_error


def uniform_params(n=1, d=1):
    return {"L": np.sqrt(2.0) * np.eye(n), "phi_alpha": np.ones((n, d)), "phi_beta": np.ones((n, d)),
            "psi_alpha": np.ones((n, d)), "psi_beta": np.ones((n, d))}


@pytest.fixture(scope="module")
def uniform_run():
    rng = np.random.default_rng(3)
    data = rng.uniform(0.001, 0.999, size=(2, 2000, 1))
    cfg = TrainConfig(n_basis=3, epochs=200, learning_rate=0.02, seed=1)
    cde, report = train_cde((data[0][:1800], data[1][:1800]), (data[0][1800:], data[1][1800:]), cfg)
    return cde, report, cfg


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.w_barrier, cfg.w_pen, cfg.epsilon, cfg.c_reg) == (1e-3, 1.0, 1e-6, 1e-4)
        assert cfg.alpha_bounds == (1.0, 400.0) and cfg.optimizer == "adam"

    @pytest.mark.parametrize("bad", [{"learning_rate": 0.0}, {"alpha_bounds": (0.5, 10)}, {"optimizer": "lbfgs"},
                                     {"grad_mode": "auto"}, {"batch_size": 0}, {"eigen_choice": "any"}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rte": 0.1})


class TestLoss:
    def test_uniform_model_on_uniform_data(self, rng):
        x, xn = rng.uniform(0.01, 0.99, size=(2, 64, 1))
        cfg = TrainConfig()
        loss, _, info = loss_and_grad_cde(uniform_params(), (x, xn), cfg)
        assert info.branch == "feasible"
        assert info.nll == pytest.approx(0.0, abs=1e-14)
        # phi's constant row is frozen and unregularized; psi's (1, 1) row counts
        assert loss == pytest.approx(-cfg.w_barrier * log_det_pd(np.eye(1)) + 2e-4, abs=1e-14)

    def test_regularization_value(self):
        reg, grads = regularization(1e-4, np.array([[2.0]]), np.array([[2.0]]))
        assert reg == pytest.approx(8e-4)
        np.testing.assert_allclose(grads[0], [[4e-4]])

    def test_regularization_skips_frozen_rows(self):
        reg, grads = regularization(1e-4, np.array([[1.0], [3.0]]), frozen_rows=(0,))
        assert reg == pytest.approx(9e-4) and grads[0][0, 0] == 0.0

    def test_random_loss_finite(self, rng):
        p = init_cde_params(3, 2, rng)
        x, xn = rng.uniform(0.05, 0.95, size=(2, 32, 2))
        assert np.isfinite(loss_cde(p, (x, xn), TrainConfig()))

    def test_infeasible_branch_positive_penalty(self, rng):
        # the largest eigenvalue always gives PSD R, so look among the smallest
        found = False
        for _ in range(100):
            p = init_cde_params(3, 1, rng, (1.0, 4.0))
            p["L"] = rng.normal(size=(3, 3))
            x, xn = rng.uniform(0.05, 0.95, size=(2, 8, 1))
            loss, _, info = loss_and_grad_cde(p, (x, xn), TrainConfig(eigen_choice="smallest"))
            if info.branch.startswith("infeasible"):
                assert info.penalty > 0 and np.isnan(info.nll)
                found = True
                break
        assert found

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_cde(uniform_params(), (np.zeros((0, 1)), np.zeros((0, 1))), TrainConfig())


class TestGradients:
    def test_analytic_matches_fd(self, rng):
        branches = set()
        done = 0
        while done < 30:
            r = cde_gradient_probe(rng)
            if r is None:
                continue
            branch, err = r
            branches.add(branch)
            assert err <= 1e-4, branch
            done += 1
        assert branches == {"feasible", "infeasible"}

    def test_frozen_coordinates_have_zero_gradient(self, rng):
        p = init_cde_params(3, 2, rng)
        x, xn = rng.uniform(0.05, 0.95, size=(2, 16, 2))
        for mode in ("analytic", "fd"):
            g = grad_loss_cde(p, (x, xn), TrainConfig(), mode)
            assert np.all(g["phi_alpha"][0] == 0) and np.all(g["phi_beta"][0] == 0)
            assert set(g) == set(CDE_KEYS)

    def test_barrier_gradient(self, rng):
        A = rng.normal(size=(4, 4))
        R = A @ A.T + 0.5 * np.eye(4)
        fd = np.zeros_like(R)
        for i in range(4):
            for j in range(4):
                E = np.zeros_like(R)
                E[i, j] = 1e-6
                fd[i, j] = (-log_det_pd(R + E) + log_det_pd(R - E)) / 2e-6
        # symmetrized perturbations: log_det_pd reads the symmetric part
        np.testing.assert_allclose(fd, -np.linalg.inv(R), atol=1e-6)

    def test_initial_belief_gradient(self, rng, small_models):
        cde = small_models[2]
        cfg = TrainConfig()
        p = init_belief_params(cde.n, cde.d, rng, (1.0, 6.0))
        x = rng.uniform(0.05, 0.95, size=(32, cde.d))
        _, ga = loss_and_grad_initial(p, x, cde, cfg, "analytic")
        gf = fd_gradient(lambda q: loss_initial(q, x, cde, cfg), p, INIT_KEYS)
        assert grad_rel_error(ga, gf) <= 1e-4

    def test_fd_fallback_flagged(self, rng, monkeypatch):
        import rfsos.training as tr
        monkeypatch.setattr(tr, "EIGEN_GAP_TOL", np.inf)
        p = init_cde_params(2, 1, rng)
        x, xn = rng.uniform(0.05, 0.95, size=(2, 8, 1))
        _, g, info = tr.loss_and_grad_cde(p, (x, xn), TrainConfig())
        assert info.branch.endswith("+fd")
        assert set(g) == set(CDE_KEYS)


class TestClamping:
    def test_clamp_and_refreeze(self):
        p = {"phi_alpha": np.array([[0.2], [900.0]]), "phi_beta": np.array([[5.0], [0.9]]),
             "psi_alpha": np.array([[3.0]]), "psi_beta": np.array([[1e9]])}
        clamp_shapes(p, (1.0, 400.0), CDE_FROZEN)
        assert p["phi_alpha"].tolist() == [[1.0], [400.0]]
        assert p["phi_beta"].tolist() == [[1.0], [1.0]]
        assert p["psi_beta"][0, 0] == 400.0

    def test_trained_shapes_within_bounds(self, uniform_run):
        cde, _, cfg = uniform_run
        lo, hi = cfg.alpha_bounds
        for b in (cde.phi, cde.psi):
            assert b.alpha.min() >= lo and b.alpha.max() <= hi
            assert b.beta.min() >= lo and b.beta.max() <= hi


class TestTrainCDE:
    def test_uniform_data_recovers_uniform(self, uniform_run):
        _, report, _ = uniform_run
        best = min(r.val_nll for r in report.epochs if r.feasible)
        assert best <= 0.05

    def test_reported_epochs_feasible(self, uniform_run):
        cde, report, _ = uniform_run
        assert cde.feasible and cde.residual() <= 1e-8
        for r in report.epochs:
            if r.feasible:
                assert r.residual <= 1e-8 and r.r_min_eig > 0

    def test_median_loss_non_increasing(self, uniform_run):
        _, report, _ = uniform_run
        losses = np.array([r.train_nll for r in report.epochs])
        med = [np.median(losses[i:i + 5]) for i in range(0, len(losses) - 4, 5)]
        # per-epoch noise near the optimum is a few 1e-3 nats
        assert all(b <= a + 1e-2 for a, b in zip(med, med[1:]))

    def test_sgd_replay_bitwise(self, rng):
        data = rng.uniform(0.01, 0.99, size=(2, 300, 1))
        cfg = TrainConfig(n_basis=3, epochs=4, optimizer="sgd", learning_rate=1e-3, batch_size=64, seed=5)
        runs = [train_cde((data[0], data[1]), (data[0], data[1]), cfg) for _ in range(2)]
        a = [(r.train_nll, r.val_nll, r.residual) for r in runs[0][1].epochs]
        b = [(r.train_nll, r.val_nll, r.residual) for r in runs[1][1].epochs]
        assert a == b
        np.testing.assert_array_equal(runs[0][0].R, runs[1][0].R)

    def test_report_csv(self, uniform_run, tmp_path):
        _, report, _ = uniform_run
        report.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,train_nll,val_nll,residual,r_min_eig,feasible,seconds")
        assert len(lines) == len(report.epochs) + 1

    def test_no_feasible_iterate_raises(self, rng):
        data = rng.uniform(0.01, 0.99, size=(2, 50, 1))
        params = uniform_params()
        params["L"] = np.zeros((1, 1))  # no positive eigenvalue, and the gradient cannot leave 0
        with pytest.raises(TrainingError) as exc:
            train_cde((data[0], data[1]), (data[0], data[1]), TrainConfig(n_basis=1, epochs=2), params)
        assert exc.value.history

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            train_cde((np.zeros((0, 1)), np.zeros((0, 1))), (np.zeros((0, 1)), np.zeros((0, 1))), TrainConfig())


class TestTrainInitial:
    def test_uniform_data_constant_chi(self, rng):
        cde = uniform_model(1)
        data = rng.uniform(0.001, 0.999, size=(500, 1))
        params = {"L0": np.array([[0.7]]), "chi_alpha": np.ones((1, 1)), "chi_beta": np.ones((1, 1))}
        b, engine, _ = train_initial(data, cde, TrainConfig(epochs=5), params=params, freeze_chi=True)
        from rfsos.belief import eval_belief
        vals = eval_belief(b, np.linspace(0.01, 0.99, 99)[:, None])
        np.testing.assert_allclose(vals, 1.0, rtol=0.02)
        assert integrate_belief(b, engine) == pytest.approx(1.0, abs=1e-12)

    def test_learns_data_and_stays_normalized(self, uniform_run, rng):
        cde, _, _ = uniform_run
        data = np.clip(rng.beta(6, 3, size=(800, 1)), 1e-6, 1 - 1e-6)
        b, engine, history = train_initial(data, cde, TrainConfig(n_basis=3, epochs=20, learning_rate=0.05))
        assert integrate_belief(b, engine) == pytest.approx(1.0, abs=1e-12)
        assert min(history) < history[0]
        from rfsos.belief import moments
        assert moments(b)[0][0] == pytest.approx(6 / 9, abs=0.03)

    def test_z_matches_quadrature(self, small_models, rng):
        cde = small_models[2]
        p = init_belief_params(cde.n, cde.d, rng, (1.0, 6.0))
        _, _, Z = _loss_initial_impl(p, rng.uniform(0.1, 0.9, size=(4, 2)), cde, TrainConfig(), False)
        chi = BetaBasis(p["chi_alpha"], p["chi_beta"])
        H = p["L0"].T @ p["L0"]

        def gh(x):
            g = np.einsum("ni,ij,nj->n", cde.phi.eval(x), cde.R, cde.phi.eval(x))
            return g * np.einsum("ni,ij,nj->n", chi.eval(x), H, chi.eval(x))

        assert Z == pytest.approx(quadrature_oracle(gh, 2, 14, levels=16), rel=1e-8)

    def test_initial_frozen_map_has_no_frozen_rows(self):
        assert all(v is None for v in INIT_FROZEN.values())

    def test_infeasible_model_refused(self, rng):
        c = BetaBasis.constant(1, 1)
        from rfsos.rf_cde import RationalFactorCDE
        with pytest.raises(TrainingError):
            train_initial(rng.uniform(0.1, 0.9, size=(10, 1)), RationalFactorCDE.build(c, c, [[0.0]]), TrainConfig())


class TestOptimizers:
    def test_sgd_step(self):
        p = {"w": np.array([1.0, 2.0])}
        SGD(0.5).step(p, {"w": np.array([2.0, -2.0])})
        np.testing.assert_allclose(p["w"], [0.0, 3.0])

    def test_adam_first_step_is_lr_sign(self):
        p = {"w": np.array([1.0, 2.0])}
        Adam(0.1).step(p, {"w": np.array([3.0, -0.01])})
        np.testing.assert_allclose(p["w"], [0.9, 2.1], rtol=1e-6)

    def test_adam_minimizes_quadratic(self):
        p = {"w": np.array([3.0, -4.0])}
        opt = make_optimizer("adam", 0.1)
        for _ in range(500):
            opt.step(p, {"w": 2 * p["w"]})
        assert np.abs(p["w"]).max() < 1e-2

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_optimizer("rmsprop", 0.1)
