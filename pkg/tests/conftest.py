import numpy as np
import pytest

from rfsos.beta_algebra import BetaBasis
from rfsos.belief import PropagationEngine, eval_belief
from rfsos.rf_cde import RationalFactorCDE, eval_conditional
from rfsos.training import build_cde, init_cde_params


def random_feasible_cde(rng, n, d, shape_range=(1.0, 20.0), choice="largest", tries=200):
    """Random bases and factor, redrawn until the normalization solve is feasible."""
    for _ in range(tries):
        params = init_cde_params(n, d, rng, shape_range)
        params["L"] = params["L"] + 0.3 * np.abs(params["L"]).max() * rng.normal(size=(n, n))
        cde = build_cde(params, choice)
        if cde.feasible:
            return cde
    raise RuntimeError("no feasible random model found")


def random_engine(rng, cde, shape_range=(1.0, 20.0)):
    chi = BetaBasis.random(cde.n, cde.d, rng, *shape_range, frozen_constant=None)
    L0 = rng.normal(size=(cde.n, cde.n))
    engine = PropagationEngine(cde, chi)
    return engine, engine.initial_belief(L0.T @ L0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_models():
    """A handful of feasible d=1 and d=2 models shared across tests."""
    r = np.random.default_rng(7)
    return [random_feasible_cde(r, n, d) for n, d in [(3, 1), (4, 1), (3, 2), (4, 2)]]


def grad_rel_error(ga: dict, gf: dict, tiny: float = 1e-8) -> float:
    """Worst per-coordinate error: relative where either gradient exceeds ``tiny``,
    absolute otherwise."""
    worst = 0.0
    for k in gf:
        a, f = np.asarray(ga[k]), np.asarray(gf[k])
        scale = np.maximum(np.abs(a), np.abs(f))
        err = np.where(scale >= tiny, np.abs(a - f) / np.where(scale >= tiny, scale, 1.0), np.abs(a - f))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def cde_gradient_probe(rng, min_gap: float = 1e-4, batch: int = 16, dims=(1,), n_range=(2, 3),
                       shape_range=(1.0, 4.0)):
    """One analytic-vs-central-difference comparison on a well-conditioned
    random instance. Returns ``(branch, error)`` or ``None`` when the draw
    sits near a repeated eigenvalue (where the eigen derivative is undefined)."""
    from rfsos.training import CDE_FROZEN, CDE_KEYS, TrainConfig, fd_gradient, init_cde_params, loss_and_grad_cde, loss_cde

    n = int(rng.integers(n_range[0], n_range[1] + 1))
    d = int(rng.choice(dims))
    cfg = TrainConfig(n_basis=n, eigen_choice=str(rng.choice(["largest", "smallest"])))
    p = init_cde_params(n, d, rng, shape_range)
    p["L"] = rng.normal(size=(n, n))
    x, xn = rng.uniform(0.05, 0.95, size=(2, batch, d))
    loss, ga, info = loss_and_grad_cde(p, (x, xn), cfg, "analytic")
    if info.eigen_gap < min_gap or info.branch.endswith("+fd"):
        return None
    gf = fd_gradient(lambda q: loss_cde(q, (x, xn), cfg), p, CDE_KEYS, CDE_FROZEN)
    return info.branch, grad_rel_error(ga, gf)


def quadrature_propagate(b0, cde, grid, steps, nodes, weights):
    """Push a belief through the transition integral on a tensor rule and
    return the step-``steps`` density at ``grid``."""
    d = cde.d
    mesh = np.meshgrid(*([nodes] * d), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    w = np.prod(np.stack(np.meshgrid(*([weights] * d), indexing="ij")), axis=0).ravel()
    p = eval_belief(b0, pts)

    def kernel(targets):
        # K[t, q] = p(target_t | node_q)
        X = np.broadcast_to(pts[None, :, :], (len(targets), len(pts), d)).reshape(-1, d)
        Xn = np.broadcast_to(targets[:, None, :], (len(targets), len(pts), d)).reshape(-1, d)
        return eval_conditional(cde, X, Xn).reshape(len(targets), len(pts))

    K_nodes = kernel(pts)
    for _ in range(steps - 1):
        p = K_nodes @ (w * p)
    return kernel(grid) @ (w * p)
