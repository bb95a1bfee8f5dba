"""Synthetic stochastic systems, datasets, the Gaussian-CDF box transform, and
the Monte-Carlo log-likelihood protocol used to score propagated beliefs."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_discrete_are
from scipy.special import ndtr, ndtri

from .belief import Belief, log_eval_belief

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- transform

@dataclass(frozen=True)
class BoxTransform:
    """Per-dimension ``x -> Phi((x - mu) / sigma)`` clamped to ``[eps, 1 - eps]``."""

    mu: np.ndarray
    sigma: np.ndarray
    clamp_eps: float = 1e-6

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if mu.shape != sigma.shape or np.any(sigma <= 0):
            raise ValueError("sigma must be positive and match mu")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self) -> int:
        return self.mu.size

    def raw(self, x) -> np.ndarray:
        return ndtr((np.asarray(x, dtype=float) - self.mu) / self.sigma)

    def forward(self, x) -> np.ndarray:
        return np.clip(self.raw(x), self.clamp_eps, 1.0 - self.clamp_eps)

    def clamped(self, x) -> np.ndarray:
        """True where any coordinate of ``x`` lands in the clamp region."""
        u = self.raw(x)
        return np.any((u < self.clamp_eps) | (u > 1.0 - self.clamp_eps), axis=-1)

    def inverse(self, u) -> np.ndarray:
        return self.mu + self.sigma * ndtri(np.asarray(u, dtype=float))

    def log_jacobian(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return np.sum(-0.5 * z ** 2 - 0.5 * np.log(2 * np.pi) - np.log(self.sigma), axis=-1)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "clamp_eps": self.clamp_eps}

    @classmethod
    def from_dict(cls, data: dict) -> "BoxTransform":
        return cls(data["mu"], data["sigma"], float(data.get("clamp_eps", 1e-6)))


def fit_transform(samples, sigma_inflation: float = 3.0, clamp_eps: float = 1e-6) -> BoxTransform:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples to fit a transform")
    sd = samples.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValueError("zero variance in some dimension")
    return BoxTransform(samples.mean(axis=0), sigma_inflation * sd, clamp_eps)


def density_change_of_variables(box_density, x_original, t: BoxTransform):
    """Box-space density reported in original units (times the forward Jacobian)."""
    x = np.asarray(x_original, dtype=float)
    if np.any(t.clamped(x)):
        warnings.warn("point lies in the clamp region; density is not meaningful", RuntimeWarning)
    return np.asarray(box_density) * np.exp(t.log_jacobian(x))


# ---------------------------------------------------------------- systems

@dataclass(frozen=True)
class SystemSpec:
    name: str
    d: int
    step: Callable[[np.ndarray], np.ndarray]
    noise: np.ndarray
    dt: float
    init_mean: np.ndarray
    init_std: np.ndarray
    params: dict = field(default_factory=dict)
    vector_field: Callable[[np.ndarray], np.ndarray] | None = None

    def sample_initial(self, N: int, rng: np.random.Generator) -> np.ndarray:
        return self.init_mean + self.init_std * rng.standard_normal((N, self.d))


def _euler(f, dt):
    return lambda x: x + dt * f(x)


def van_der_pol(mu: float = 1.0, dt: float = 0.1, noise: float = 0.05,
                init_mean=(1.5, 0.0), init_std: float = 0.1) -> SystemSpec:
    def f(s):
        x, v = s[..., 0], s[..., 1]
        return np.stack([v, mu * (1.0 - x * x) * v - x], axis=-1)

    return SystemSpec("van_der_pol", 2, _euler(f, dt), np.full(2, noise), dt,
                      np.asarray(init_mean, dtype=float), np.full(2, init_std),
                      {"mu": mu}, f)


def _lqr_gain(A, B, dt):
    Ad = np.eye(A.shape[0]) + dt * A
    Bd = dt * B
    P = solve_discrete_are(Ad, Bd, np.eye(A.shape[0]), np.eye(B.shape[1]))
    return np.linalg.solve(Bd.T @ P @ Bd + np.eye(B.shape[1]), Bd.T @ P @ Ad)


def cartpole(dt: float = 0.05, noise: float = 0.02, init_std: float = 0.1,
             m_cart: float = 1.0, m_pole: float = 0.1, length: float = 0.5, g: float = 9.81) -> SystemSpec:
    """Cart-pole near upright, state ``[x, theta, xdot, thetadot]``, LQR feedback."""
    mt = m_cart + m_pole
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    denom = length * (4.0 / 3.0 - m_pole / mt)
    A[3, 1] = g / denom
    A[2, 1] = -m_pole * length * A[3, 1] / mt
    B = np.zeros((4, 1))
    B[3, 0] = -1.0 / (mt * denom)
    B[2, 0] = 1.0 / mt - m_pole * length * B[3, 0] / mt
    K = _lqr_gain(A, B, dt)

    def f(s):
        th, xd, thd = s[..., 1], s[..., 2], s[..., 3]
        u = -(s @ K.T)[..., 0]
        sin, cos = np.sin(th), np.cos(th)
        tmp = (u + m_pole * length * thd ** 2 * sin) / mt
        thdd = (g * sin - cos * tmp) / (length * (4.0 / 3.0 - m_pole * cos ** 2 / mt))
        xdd = tmp - m_pole * length * thdd * cos / mt
        return np.stack([xd, thd, xdd, thdd], axis=-1)

    return SystemSpec("cartpole", 4, _euler(f, dt), np.full(4, noise), dt,
                      np.zeros(4), np.full(4, init_std), {"K": K}, f)


def planar_quadcopter(dt: float = 0.05, noise: float = 0.02, init_std: float = 0.2,
                      mass: float = 1.0, inertia: float = 0.02, g: float = 9.81) -> SystemSpec:
    """Planar quadcopter ``[x, y, vx, vy, rho, nu]`` (angle, angular rate) with
    hover-linearized LQR feedback on thrust and torque."""
    A = np.zeros((6, 6))
    A[0, 2] = A[1, 3] = A[4, 5] = 1.0
    A[2, 4] = -g
    B = np.zeros((6, 2))
    B[3, 0] = 1.0 / mass
    B[5, 1] = 1.0 / inertia
    K = _lqr_gain(A, B, dt)

    def f(s):
        vx, vy, rho, nu = s[..., 2], s[..., 3], s[..., 4], s[..., 5]
        u = -(s @ K.T)
        thrust = mass * g + u[..., 0]
        return np.stack([vx, vy, -thrust * np.sin(rho) / mass,
                         thrust * np.cos(rho) / mass - g, nu, u[..., 1] / inertia], axis=-1)

    init_mean = np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    return SystemSpec("planar_quadcopter", 6, _euler(f, dt), np.full(6, noise), dt,
                      init_mean, np.full(6, init_std), {"K": K}, f)


def linear_1d(a: float = 0.9, noise: float = 0.3, init_mean: float = 1.0, init_std: float = 0.2) -> SystemSpec:
    """Scalar AR(1) process ``x' = a x + w``; the 1-D smoke-test system."""
    f = lambda s: (a - 1.0) * s  # noqa: E731  (Euler with dt = 1)
    return SystemSpec("linear_1d", 1, _euler(f, 1.0), np.array([noise]), 1.0,
                      np.array([init_mean]), np.array([init_std]), {"a": a}, f)


SYSTEMS = {"linear_1d": linear_1d, "van_der_pol": van_der_pol, "cartpole": cartpole, "planar_quadcopter": planar_quadcopter}


def get_system(name: str, **kwargs) -> SystemSpec:
    try:
        return SYSTEMS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def _rng(seed) -> np.random.Generator:
    """Counter-based generator so streams split deterministically from one seed."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def simulate(system: SystemSpec, x0_batch, steps: int, seed) -> np.ndarray:
    """Trajectories ``x_{k+1} = F(x_k) + w_k``, shape (steps + 1, N, d).

    Particles that become non-finite are dropped (with a warning).
    """
    rng = _rng(seed)
    x = np.atleast_2d(np.asarray(x0_batch, dtype=float)).copy()
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            x = system.step(x) + system.noise * rng.standard_normal(x.shape)
            out[k + 1] = x
    ok = np.all(np.isfinite(out), axis=(0, 2))
    if not ok.all():
        log.warning("%d particles diverged and were excluded", int((~ok).sum()))
    return out[:, ok]


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class Dataset:
    kind: str
    points: np.ndarray
    space: str = "box"
    transform: BoxTransform | None = None

    def __post_init__(self):
        if self.kind not in ("initial", "transition"):
            raise ValueError("kind must be 'initial' or 'transition'")
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))

    @property
    def d(self) -> int:
        cols = self.points.shape[1]
        return cols // 2 if self.kind == "transition" else cols

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, :self.d]

    @property
    def x_next(self) -> np.ndarray:
        if self.kind != "transition":
            raise AttributeError("initial datasets have no successor states")
        return self.points[:, self.d:]

    def header(self) -> list[str]:
        cols = [f"x_{i + 1}" for i in range(self.d)]
        if self.kind == "transition":
            cols += [f"xp_{i + 1}" for i in range(self.d)]
        return cols

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, transform: BoxTransform | None = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        kind = "transition" if any(h.startswith("xp_") for h in header) else "initial"
        pts = np.array(rows[1:], dtype=float).reshape(-1, len(header))
        return cls(kind, pts, "box", transform)


def transition_pairs(traj: np.ndarray, burn_in: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Flatten (K+1, N, d) trajectories into step-major ``(x, x')`` pairs."""
    d = traj.shape[2]
    return traj[burn_in:-1].reshape(-1, d), traj[burn_in + 1:].reshape(-1, d)


def make_datasets(system: SystemSpec, N0: int, N: int, seed: int, horizon: int = 10,
                  burn_in: int = 0, explore_frac: float = 0.5, explore_box=(0.1, 0.9),
                  sigma_inflation: float = 3.0, clamp_eps: float = 1e-6):
    """Initial and transition datasets in box space plus the fitted transform.

    Transition conditioners mix on-trajectory states (simulated from the
    initial sampler) with states drawn uniformly from ``explore_box`` in box
    coordinates; the transform is fitted on the initial and trajectory states.
    """
    s_init, s_starts, s_traj, s_explore = np.random.SeedSequence(seed).spawn(4)
    x0 = system.sample_initial(N0, _rng(s_init))

    n_explore = int(round(explore_frac * N))
    n_traj = N - n_explore
    per = max(horizon - burn_in, 1)
    n_runs = -(-n_traj // per) if n_traj else 0
    starts = system.sample_initial(max(n_runs, 1), _rng(s_starts))[:n_runs]
    traj = simulate(system, starts, horizon, s_traj) if n_runs else np.empty((horizon + 1, 0, system.d))
    tx, txn = transition_pairs(traj, burn_in)
    tx, txn = tx[:n_traj], txn[:n_traj]

    pool = np.concatenate([x0, traj.reshape(-1, system.d)]) if traj.size else x0
    t = fit_transform(pool, sigma_inflation, clamp_eps)

    if n_explore:
        rng = _rng(s_explore)
        lo, hi = explore_box
        ex = t.inverse(rng.uniform(lo, hi, size=(n_explore, system.d)))
        exn = simulate(system, ex, 1, rng.integers(2 ** 63))[1]
        if exn.shape[0] != n_explore:
            raise ValueError("exploration states diverged; narrow explore_box")
        tx = np.concatenate([tx, ex])
        txn = np.concatenate([txn, exn])

    initial = Dataset("initial", t.forward(x0), "box", t)
    trans = Dataset("transition", np.concatenate([t.forward(tx), t.forward(txn)], axis=1).reshape(-1, 2 * system.d),
                    "box", t)
    return initial, trans, t


# ---------------------------------------------------------------- evaluation

def evaluate_llh(beliefs: list[Belief], mc: np.ndarray, t: BoxTransform):
    """Per-step average box-space log-likelihood of MC particles.

    ``mc`` is (K+1, N, d) in original units. Returns ``(llh, excluded)``
    arrays of length ``min(len(beliefs), K+1)``.
    """
    steps = min(len(beliefs), mc.shape[0])
    llh = np.empty(steps)
    excluded = np.zeros(steps, dtype=int)
    for k in range(steps):
        pts = mc[k]
        if pts.shape[0] == 0:
            raise ValueError("empty particle set")
        bad = t.clamped(pts)
        excluded[k] = int(bad.sum())
        if bad.all():
            raise ValueError(f"all particles at step {k} fall in the clamp region")
        llh[k] = float(np.mean(log_eval_belief(beliefs[k], t.forward(pts[~bad]))))
    return llh, excluded
