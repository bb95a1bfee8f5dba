"""Two-stage training: the rational-factor CDE first, then the initial belief.

Parameters live in plain dicts of arrays so the optimizers can update them in
place. The CDE loss runs the normalization eigen-solve on every call; its
gradient goes through the eigenpair with a bordered-system adjoint:

    [M0 - lam I   -v] [dv  ]   [-dM0 v]
    [v^T           0] [dlam] = [   0  ]

which differentiates ``M0 v = lam v`` under the fixed-norm constraint on ``v``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import digamma

from .beta_algebra import (
    DEFAULT_ALPHA_MAX,
    DEFAULT_ALPHA_MIN,
    INTEGRABILITY_FLOOR,
    BetaBasis,
    cross_moment_tensor,
    four_way_exponents,
)
from .belief import Belief, PropagationEngine
from .optim import make_optimizer
from .quadratic_forms import PsdFactor, log_det_pd, log_form_values
from .rf_cde import EIGEN_CHOICES, RationalFactorCDE, mean_log_conditional, normalization_matrix, solve_normalization

log = logging.getLogger(__name__)

CDE_KEYS = ("L", "phi_alpha", "phi_beta", "psi_alpha", "psi_beta")
INIT_KEYS = ("L0", "chi_alpha", "chi_beta")
EIGEN_GAP_TOL = 1e-6


class TrainingError(RuntimeError):
    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class TrainConfig:
    n_basis: int = 10
    learning_rate: float = 1e-2
    batch_size: int = 256
    epochs: int = 50
    w_barrier: float = 1e-3
    w_pen: float = 1.0
    epsilon: float = 1e-6
    c_reg: float = 1e-4
    alpha_bounds: tuple[float, float] = (DEFAULT_ALPHA_MIN, DEFAULT_ALPHA_MAX)
    init_shape_range: tuple[float, float] = (1.0, 20.0)
    seed: int = 0
    optimizer: str = "adam"
    grad_mode: str = "analytic"
    eigen_choice: str = "largest"
    initial_epochs: int | None = None

    def __post_init__(self):
        self.alpha_bounds = tuple(float(v) for v in self.alpha_bounds)
        self.init_shape_range = tuple(float(v) for v in self.init_shape_range)
        lo, hi = self.alpha_bounds
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (INTEGRABILITY_FLOOR < lo <= hi):
            raise ValueError(f"alpha_bounds must satisfy {INTEGRABILITY_FLOOR} < min <= max")
        if lo < 0.8:
            raise ValueError("alpha_bounds minimum below 0.8 is not supported")
        if self.n_basis < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("n_basis, batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.grad_mode not in ("analytic", "fd"):
            raise ValueError("grad_mode must be 'analytic' or 'fd'")
        if self.eigen_choice not in EIGEN_CHOICES:
            raise ValueError(f"eigen_choice must be one of {EIGEN_CHOICES}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    residual: float
    r_min_eig: float
    feasible: bool
    feasible_fraction: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    fd_fallbacks: int = 0

    def write_csv(self, path) -> None:
        # "seconds" is wall time, the only column that differs between reruns
        cols = ["epoch", "train_nll", "val_nll", "residual", "r_min_eig", "feasible", "seconds",
                "feasible_fraction"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.epochs:
                row = asdict(r)
                w.writerow([row[c] for c in cols])


# ---------------------------------------------------------------- parameters

def cde_bases(params: dict) -> tuple[BetaBasis, BetaBasis]:
    phi = BetaBasis(params["phi_alpha"], params["phi_beta"], frozen_constant=0)
    psi = BetaBasis(params["psi_alpha"], params["psi_beta"])
    return phi, psi


def build_cde(params: dict, choice: str = "largest") -> RationalFactorCDE:
    phi, psi = cde_bases(params)
    return RationalFactorCDE.build(phi, psi, params["L"], choice)


def init_cde_params(n: int, d: int, rng: np.random.Generator, shape_range=(1.0, 20.0)) -> dict:
    """Log-uniform shapes; ``L`` scaled so the first ``M0`` has spectral radius near 1."""
    phi = BetaBasis.random(n, d, rng, *shape_range, frozen_constant=0)
    psi = BetaBasis.random(n, d, rng, *shape_range, frozen_constant=None)
    E = cross_moment_tensor(phi, psi)
    scale = 1.0 / np.sqrt(n * np.mean(E.entries.sum(axis=1)))
    L = scale * np.eye(n) + 0.01 * scale * rng.normal(size=(n, n))
    return {"L": L, "phi_alpha": np.array(phi.alpha), "phi_beta": np.array(phi.beta),
            "psi_alpha": np.array(psi.alpha), "psi_beta": np.array(psi.beta)}


def clamp_shapes(params: dict, bounds, frozen: dict[str, int | None]) -> None:
    lo, hi = bounds
    for k, row in frozen.items():
        np.clip(params[k], lo, hi, out=params[k])
        if row is not None:
            params[k][row] = 1.0


CDE_FROZEN = {"phi_alpha": 0, "phi_beta": 0, "psi_alpha": None, "psi_beta": None}
INIT_FROZEN = {"chi_alpha": None, "chi_beta": None}


def regularization(c_reg: float, *shape_arrays, frozen_rows=()) -> tuple[float, list[np.ndarray]]:
    """``c_reg * sum(shape**2)`` over non-frozen rows and its gradients."""
    total, grads = 0.0, []
    for k, arr in enumerate(shape_arrays):
        mask = np.ones(arr.shape[0], dtype=bool)
        row = frozen_rows[k] if k < len(frozen_rows) else None
        if row is not None:
            mask[row] = False
        total += c_reg * float(np.sum(arr[mask] ** 2))
        g = 2.0 * c_reg * arr
        g[~mask] = 0.0
        grads.append(g)
    return total, grads


def _shape_grads_from_tensor(gE: np.ndarray, E4: np.ndarray, A: np.ndarray, B: np.ndarray):
    """Backpropagate d(loss)/dE through ``E = prod_m Beta(A_m + 1, B_m + 1)``.

    Returns gradients for the left basis (a, b) and right basis (a, b); the
    exponents are ``alpha - 1`` so these are also the shape gradients.
    """
    W = (gE.reshape(E4.shape) * E4)[..., None]
    psi_ab = digamma(A + B + 2.0)
    Wa = W * (digamma(A + 1.0) - psi_ab)
    Wb = W * (digamma(B + 1.0) - psi_ab)
    left_a = Wa.sum(axis=(1, 2, 3)) + Wa.sum(axis=(0, 2, 3))
    left_b = Wb.sum(axis=(1, 2, 3)) + Wb.sum(axis=(0, 2, 3))
    right_a = Wa.sum(axis=(0, 1, 3)) + Wa.sum(axis=(0, 1, 2))
    right_b = Wb.sum(axis=(0, 1, 3)) + Wb.sum(axis=(0, 1, 2))
    return left_a, left_b, right_a, right_b


def _eval_shape_grads(dlog: np.ndarray, pts: np.ndarray):
    """Gradients of sum_{p,i} dlog[p, i] * log b_i(pts[p]) w.r.t. (alpha, beta)."""
    return dlog.T @ np.log(pts), dlog.T @ np.log1p(-pts)


def _form_log_grad(b: np.ndarray, val: np.ndarray, C: np.ndarray) -> np.ndarray:
    """d log(b^T C b) / d log b_i for scaled kernel values ``b``."""
    return 2.0 * b * (b @ C) / val[:, None]


# ---------------------------------------------------------------- CDE loss

@dataclass
class LossInfo:
    branch: str
    nll: float = np.nan
    reg: float = 0.0
    barrier: float = 0.0
    penalty: float = 0.0
    residual: float = np.inf
    r_min_eig: float = -np.inf
    eigen_gap: float = np.inf


def _loss_cde_impl(params: dict, batch, cfg: TrainConfig, want_grad: bool):
    x, xn = (np.atleast_2d(np.asarray(a, dtype=float)) for a in batch)
    N = x.shape[0]
    if N == 0:
        raise ValueError("empty batch")
    phi, psi = cde_bases(params)
    n = phi.n
    L = np.asarray(params["L"], dtype=float)
    E = cross_moment_tensor(phi, psi)
    sol = solve_normalization(PsdFactor(L), E, cfg.eigen_choice)
    reg, reg_grads = regularization(cfg.c_reg, params["phi_alpha"], params["phi_beta"],
                                    params["psi_alpha"], params["psi_beta"], frozen_rows=(0, 0, None, None))
    info = LossInfo("infeasible", reg=reg, residual=sol.residual, r_min_eig=sol.r_min_eig,
                    eigen_gap=sol.eigen_gap)
    grads = {k: np.zeros_like(np.asarray(params[k], dtype=float)) for k in CDE_KEYS}
    for k, g in zip(CDE_KEYS[1:], reg_grads):
        grads[k] += g

    if sol.scale_lambda is None:
        # No positive real eigenvalue: treat every eigenvalue of R as zero.
        info.penalty = cfg.w_pen * n * cfg.epsilon ** 2
        return info.penalty + reg, grads, info

    lam = sol.scale_lambda
    R = sol.R
    Qt = L.T @ L
    Q = Qt / lam
    logdet = log_det_pd(R) if sol.r_min_eig > 0 else None

    gR = np.zeros_like(R)
    gQ = np.zeros_like(Q)
    if logdet is not None:
        info.branch = "feasible"
        lphx, lphn, lpsn = phi.log_eval(x), phi.log_eval(xn), psi.log_eval(xn)
        lgx, px, gx = log_form_values(lphx, R)
        lgn, pn, gn = log_form_values(lphn, R)
        lf, bb, fv = log_form_values(lphx + lpsn, Q)
        info.nll = -float(np.mean(lgn + lf - lgx))
        info.barrier = -cfg.w_barrier * logdet
        loss = info.nll + info.barrier + reg
        if not want_grad:
            return loss, grads, info
        gR += ((px.T / gx) @ px - (pn.T / gn) @ pn) / N
        gQ -= ((bb.T / fv) @ bb) / N
        gR -= cfg.w_barrier * np.linalg.inv(R)
        d_phn = -_form_log_grad(pn, gn, R) / N
        d_phx = _form_log_grad(px, gx, R) / N
        d_b = -_form_log_grad(bb, fv, Q) / N
        ga, gb = _eval_shape_grads(d_phx + d_b, x)
        ga2, gb2 = _eval_shape_grads(d_phn, xn)
        grads["phi_alpha"] += ga + ga2
        grads["phi_beta"] += gb + gb2
        ga, gb = _eval_shape_grads(d_b, xn)
        grads["psi_alpha"] += ga
        grads["psi_beta"] += gb
    else:
        w, U = np.linalg.eigh(R)
        hinge = np.maximum(-w + cfg.epsilon, 0.0)
        info.penalty = cfg.w_pen * float(np.sum(hinge ** 2))
        loss = info.penalty + reg
        if not want_grad:
            return loss, grads, info
        gR += (U * (-2.0 * cfg.w_pen * hinge)) @ U.T

    # Through Q = Qt / lam.
    gQt = gQ / lam
    g_lam = -float(np.sum(gQ * Qt)) / lam ** 2
    # Through R = mat(v), v the normalized eigenvector of M0.
    g_v = (0.5 * (gR + gR.T)).ravel()
    M0 = sol.M0
    v = sol.vR
    m = v.size
    A = np.zeros((m + 1, m + 1))
    A[:m, :m] = M0 - lam * np.eye(m)
    A[:m, m] = -v
    A[m, :m] = v
    ws = np.linalg.solve(A.T, np.concatenate([g_v, [g_lam]]))
    gM0 = -np.outer(ws[:m], v)
    # Through M0 = diag(vec Qt) E^T.
    ET = E.entries.T
    gQt += np.sum(gM0 * ET, axis=1).reshape(n, n)
    gE = (Qt.reshape(-1, 1) * gM0).T
    grads["L"] += L @ (gQt + gQt.T)
    Aexp, Bexp = four_way_exponents(phi, psi)
    la, lb, ra, rb = _shape_grads_from_tensor(gE, E.as_tensor(), Aexp, Bexp)
    grads["phi_alpha"] += la
    grads["phi_beta"] += lb
    grads["psi_alpha"] += ra
    grads["psi_beta"] += rb
    grads["phi_alpha"][0] = 0.0
    grads["phi_beta"][0] = 0.0
    return loss, grads, info


def loss_cde(params: dict, batch, cfg: TrainConfig) -> float:
    return _loss_cde_impl(params, batch, cfg, want_grad=False)[0]


def fd_gradient(fun, params: dict, keys, frozen: dict[str, int | None] | None = None) -> dict:
    """Central differences with step ``1e-5 * (1 + |theta|)``; frozen rows get 0."""
    frozen = frozen or {}
    work = {k: np.array(v, dtype=float) for k, v in params.items()}
    grads = {}
    for k in keys:
        arr = work[k]
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            if frozen.get(k) is not None and idx[0] == frozen[k]:
                continue
            orig = arr[idx]
            h = 1e-5 * (1.0 + abs(orig))
            arr[idx] = orig + h
            fp = fun(work)
            arr[idx] = orig - h
            fm = fun(work)
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads[k] = g
    return grads


def loss_and_grad_cde(params: dict, batch, cfg: TrainConfig, mode: str | None = None):
    """Loss, gradient dict and :class:`LossInfo`.

    Analytic mode falls back to finite differences when the chosen eigenvalue
    is within ``EIGEN_GAP_TOL * spectral_radius`` of another one.
    """
    mode = mode or cfg.grad_mode
    loss, grads, info = _loss_cde_impl(params, batch, cfg, want_grad=(mode == "analytic"))
    if mode == "analytic" and info.eigen_gap < EIGEN_GAP_TOL:
        log.info("near-repeated eigenvalue (gap %.2e); finite-difference gradient this step", info.eigen_gap)
        info.branch += "+fd"
        mode = "fd"
    if mode == "fd":
        grads = fd_gradient(lambda p: loss_cde(p, batch, cfg), params, CDE_KEYS, CDE_FROZEN)
    return loss, grads, info


def grad_loss_cde(params: dict, batch, cfg: TrainConfig, mode: str | None = None) -> dict:
    return loss_and_grad_cde(params, batch, cfg, mode)[1]


# ---------------------------------------------------------------- training loops

def _batches(N: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(N)
    for start in range(0, N, batch_size):
        yield perm[start:start + batch_size]


def _nll(cde: RationalFactorCDE, x, xn) -> float:
    if not cde.feasible or len(x) == 0:
        return np.inf
    return -mean_log_conditional(cde, x, xn)[0]


def train_cde(train, val, cfg: TrainConfig, params: dict | None = None):
    """Mini-batch training of the conditional model.

    ``train`` and ``val`` are ``(x, x_next)`` pairs of (N, d) box-space arrays.
    Returns the feasible model with the best validation NLL and the report.
    """
    x, xn = (np.asarray(a, dtype=float) for a in train)
    vx, vxn = (np.asarray(a, dtype=float) for a in val)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_cde_params(cfg.n_basis, x.shape[1], rng, cfg.init_shape_range)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    clamp_shapes(params, cfg.alpha_bounds, CDE_FROZEN)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    report = TrainReport()
    best, best_val = None, np.inf
    history = []

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        n_ok = n_steps = 0
        for idx in _batches(x.shape[0], cfg.batch_size, rng):
            loss, grads, info = loss_and_grad_cde(params, (x[idx], xn[idx]), cfg)
            if info.branch.endswith("+fd"):
                report.fd_fallbacks += 1
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                log.warning("epoch %d: non-finite loss or gradient (%s); aborting epoch", epoch, info)
                break
            n_steps += 1
            n_ok += info.branch.startswith("feasible")
            opt.step(params, grads)
            clamp_shapes(params, cfg.alpha_bounds, CDE_FROZEN)
        try:
            cde = build_cde(params, cfg.eigen_choice)
        except ValueError as exc:
            log.warning("epoch %d: could not build model: %s", epoch, exc)
            continue
        sol = cde.solution
        train_nll, val_nll = _nll(cde, x, xn), _nll(cde, vx, vxn)
        rec = EpochRecord(epoch, train_nll, val_nll, sol.residual, sol.r_min_eig, cde.feasible,
                          n_ok / max(n_steps, 1), time.perf_counter() - t0)
        report.epochs.append(rec)
        history.append((epoch, cde.feasible, sol.r_min_eig))
        log.info("epoch %d train_nll %.4f val_nll %.4f residual %.1e rmin %.2e (%.2fs)",
                 epoch, train_nll, val_nll, sol.residual, sol.r_min_eig, rec.seconds)
        if cde.feasible and val_nll < best_val:
            best, best_val = cde, val_nll
    if cfg.epochs == 0:
        best = build_cde(params, cfg.eigen_choice)
        if not best.feasible:
            best = None
    if best is None:
        raise TrainingError("no feasible iterate found", history)
    return best, report


def init_belief_params(n: int, d: int, rng: np.random.Generator, shape_range=(1.0, 20.0)) -> dict:
    chi = BetaBasis.random(n, d, rng, *shape_range, frozen_constant=None)
    return {"L0": np.eye(n) + 0.01 * rng.normal(size=(n, n)),
            "chi_alpha": np.array(chi.alpha), "chi_beta": np.array(chi.beta)}


def _loss_initial_impl(params: dict, x: np.ndarray, cde: RationalFactorCDE, cfg: TrainConfig,
                       want_grad: bool):
    chi = BetaBasis(params["chi_alpha"], params["chi_beta"])
    L0 = np.asarray(params["L0"], dtype=float)
    H = L0.T @ L0
    R = cde.R
    E = cross_moment_tensor(cde.phi, chi)
    vR = R.ravel()
    Z = float(vR @ E.entries @ H.ravel())
    lg = log_form_values(cde.phi.log_eval(x), R)[0]
    lh, cc, hv = log_form_values(chi.log_eval(x), H)
    reg, reg_grads = regularization(cfg.c_reg, params["chi_alpha"], params["chi_beta"])
    loss = -float(np.mean(lg + lh)) + np.log(Z) + reg
    grads = {}
    if not want_grad:
        return loss, grads, Z
    N = x.shape[0]
    gH = -((cc.T / hv) @ cc) / N + (vR @ E.entries).reshape(H.shape) / Z
    grads["L0"] = L0 @ (gH + gH.T)
    d_chi = -_form_log_grad(cc, hv, H) / N
    ga, gb = _eval_shape_grads(d_chi, x)
    gE = np.outer(vR, H.ravel()) / Z
    A, B = four_way_exponents(cde.phi, chi)
    _, _, ra, rb = _shape_grads_from_tensor(gE, E.as_tensor(), A, B)
    grads["chi_alpha"] = ga + ra + reg_grads[0]
    grads["chi_beta"] = gb + rb + reg_grads[1]
    return loss, grads, Z


def loss_initial(params: dict, x, cde: RationalFactorCDE, cfg: TrainConfig) -> float:
    return _loss_initial_impl(params, np.atleast_2d(x), cde, cfg, False)[0]


def loss_and_grad_initial(params: dict, x, cde: RationalFactorCDE, cfg: TrainConfig, mode: str | None = None):
    mode = mode or cfg.grad_mode
    x = np.atleast_2d(np.asarray(x, dtype=float))
    loss, grads, _ = _loss_initial_impl(params, x, cde, cfg, mode == "analytic")
    if mode == "fd":
        grads = fd_gradient(lambda p: loss_initial(p, x, cde, cfg), params, INIT_KEYS)
    return loss, grads


def train_initial(data, cde: RationalFactorCDE, cfg: TrainConfig, val=None, params: dict | None = None,
                  freeze_chi: bool = False):
    """Fit ``h0`` (coefficients ``L0^T L0`` over its own basis ``chi``) with ``g`` frozen.
    ``freeze_chi`` keeps the ``chi`` shapes at their initial values.

    Returns ``(belief, engine, history)``; the belief is normalized exactly
    through the analytic integral, and the engine carries the matching tensors.
    """
    x = np.atleast_2d(np.asarray(data, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty initial-state dataset")
    if not cde.feasible:
        raise TrainingError("initial belief needs a feasible conditional model")
    vx = x if val is None or len(val) == 0 else np.atleast_2d(np.asarray(val, dtype=float))
    rng = np.random.default_rng(cfg.seed + 1)
    if params is None:
        params = init_belief_params(cde.n, cde.d, rng, cfg.init_shape_range)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    clamp_shapes(params, cfg.alpha_bounds, INIT_FROZEN)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    epochs = cfg.epochs if cfg.initial_epochs is None else cfg.initial_epochs
    best, best_val = {k: v.copy() for k, v in params.items()}, loss_initial(params, vx, cde, cfg)
    history = [best_val]
    for epoch in range(epochs):
        for idx in _batches(x.shape[0], cfg.batch_size, rng):
            loss, grads = loss_and_grad_initial(params, x[idx], cde, cfg)
            if freeze_chi:
                grads["chi_alpha"] = np.zeros_like(params["chi_alpha"])
                grads["chi_beta"] = np.zeros_like(params["chi_beta"])
            if not np.isfinite(loss):
                log.warning("initial-belief epoch %d: non-finite loss; aborting epoch", epoch)
                break
            opt.step(params, grads)
            clamp_shapes(params, cfg.alpha_bounds, INIT_FROZEN)
        val_loss = loss_initial(params, vx, cde, cfg)
        history.append(val_loss)
        if val_loss < best_val:
            best, best_val = {k: v.copy() for k, v in params.items()}, val_loss
    chi = BetaBasis(best["chi_alpha"], best["chi_beta"])
    engine = PropagationEngine(cde, chi)
    return engine.initial_belief(best["L0"].T @ best["L0"]), engine, history
