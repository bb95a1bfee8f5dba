"""Rational-factor conditional density ``p(x'|x) = g(x') f(x, x') / g(x)``.

``f`` is an SoS form over ``b(x, x') = phi(x) o psi(x')`` with coefficients
``Q = L^T L / lambda`` and ``g`` is an SoS form over ``phi`` with coefficients
``R``. Normalization in ``x'`` holds exactly when ``vec(R)`` is a fixed point of
``diag(vec Q) E^T`` where ``E`` is the (phi, psi) cross-moment tensor; ``R`` is
obtained as an eigenvector after rescaling ``Q``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .beta_algebra import BetaBasis, CrossMomentTensor, check_interior, cross_moment_tensor
from .quadratic_forms import NumericError, PsdFactor, general_real_eigen, log_form_values

log = logging.getLogger(__name__)

MODEL_VERSION = 1
RESIDUAL_TOL = 1e-8
IMAG_TOL = 1e-9
EIGEN_CHOICES = ("largest", "best_margin", "smallest")


class ModelInvalidError(ValueError):
    """Density query on a model whose ``R`` is not positive definite."""


class ModelCorruptError(ValueError):
    """Serialized model failed its load-time normalization check."""


@dataclass(frozen=True)
class NormalizationSolution:
    scale_lambda: float | None
    vR: np.ndarray | None
    residual: float
    r_min_eig: float
    feasible: bool
    asymmetry: float = 0.0
    n_pd_candidates: int = 0
    eigen_gap: float = np.inf
    M0: np.ndarray | None = field(default=None, repr=False)

    @property
    def R(self) -> np.ndarray | None:
        if self.vR is None:
            return None
        n = int(round(np.sqrt(self.vR.size)))
        return self.vR.reshape(n, n)


def normalization_matrix(Qt: np.ndarray, E: CrossMomentTensor) -> np.ndarray:
    """``M0 = diag(vec Qt) E^T``: row (i, j) indexes the Q/psi pair, column
    (k, l) the R/phi pair."""
    return Qt.reshape(-1, 1) * E.entries.T


def _candidate_R(vec: np.ndarray, n: int):
    V = np.real(vec).reshape(n, n)
    asym = float(np.linalg.norm(V - V.T) / max(np.linalg.norm(V), 1e-300))
    R = 0.5 * (V + V.T)
    if np.trace(R) < 0:
        R = -R
    R *= n / np.linalg.norm(R)
    return R, asym


def solve_normalization(L: PsdFactor, E: CrossMomentTensor, choice: str = "largest") -> NormalizationSolution:
    """Rescale ``Q`` by a positive real eigenvalue of ``M0`` and take its
    eigenvector as ``vec(R)``.

    ``choice`` picks among positive real eigenvalues: ``largest`` (default),
    ``best_margin`` (greatest minimum eigenvalue of ``R``) or ``smallest``.
    Never raises on numerical trouble; returns an infeasible solution instead.
    """
    if choice not in EIGEN_CHOICES:
        raise ValueError(f"eigen choice must be one of {EIGEN_CHOICES}")
    n = L.n
    if E.entries.shape != (n * n, n * n):
        raise ValueError("cross-moment tensor does not match factor size")
    M0 = normalization_matrix(L.Q, E)
    try:
        w, vecs = general_real_eigen(M0)
    except NumericError as exc:
        log.warning("normalization eigen-solve failed: %s", exc)
        return NormalizationSolution(None, None, np.inf, -np.inf, False, M0=M0)

    rho = float(np.max(np.abs(w))) if w.size else 0.0
    cand = np.flatnonzero((np.abs(w.imag) <= IMAG_TOL * rho) & (w.real > IMAG_TOL * rho))
    if rho == 0.0 or cand.size == 0:
        return NormalizationSolution(None, None, np.inf, -np.inf, False, M0=M0)

    built = {}
    for c in cand:
        R, asym = _candidate_R(vecs[:, c], n)
        built[c] = (R, asym, float(np.linalg.eigvalsh(R)[0]))
    n_pd = sum(1 for v in built.values() if v[2] > 0)
    if n_pd > 1:
        log.debug("%d positive-real eigenvalues give a PD R", n_pd)

    if choice == "largest":
        pick = cand[np.argmax(w.real[cand])]
    elif choice == "smallest":
        pick = cand[np.argmin(w.real[cand])]
    else:
        pick = max(cand, key=lambda c: built[c][2])
    lam = float(w.real[pick])
    R, asym, rmin = built[pick]

    others = np.delete(w, pick)
    gap = float(np.min(np.abs(others - lam)) / rho) if others.size else np.inf
    vR = R.ravel()
    residual = float(np.linalg.norm(M0 @ vR / lam - vR) / np.linalg.norm(vR))
    feasible = bool(rmin > 0.0 and residual <= RESIDUAL_TOL)
    return NormalizationSolution(lam, vR, residual, rmin, feasible, asym, n_pd, gap, M0)


@dataclass(frozen=True)
class RationalFactorCDE:
    phi: BetaBasis
    psi: BetaBasis
    L: PsdFactor
    solution: NormalizationSolution
    E: CrossMomentTensor = field(repr=False)

    @classmethod
    def build(cls, phi: BetaBasis, psi: BetaBasis, L, choice: str = "largest") -> "RationalFactorCDE":
        if phi.d != psi.d or phi.n != psi.n:
            raise ValueError("phi and psi must share n and d")
        if phi.frozen_constant is None:
            raise ValueError("phi needs a frozen constant row so that g > 0")
        L = L if isinstance(L, PsdFactor) else PsdFactor(L)
        E = cross_moment_tensor(phi, psi)
        return cls(phi, psi, L, solve_normalization(L, E, choice), E)

    @property
    def n(self) -> int:
        return self.phi.n

    @property
    def d(self) -> int:
        return self.phi.d

    @property
    def feasible(self) -> bool:
        return self.solution.feasible

    @property
    def scale_lambda(self) -> float | None:
        return self.solution.scale_lambda

    @property
    def Q(self) -> np.ndarray:
        if self.solution.scale_lambda is None:
            raise ModelInvalidError("no positive real eigenvalue; Q is undefined")
        return self.L.Q / self.solution.scale_lambda

    @property
    def R(self) -> np.ndarray:
        if self.solution.R is None:
            raise ModelInvalidError("normalization solve failed; R is undefined")
        return self.solution.R

    def residual(self) -> float:
        """Fixed-point residual ``||(diag(vQ) E^T - I) vR|| / ||vR||``."""
        vR = self.R.ravel()
        return float(np.linalg.norm(normalization_matrix(self.Q, self.E) @ vR - vR) / np.linalg.norm(vR))

    def log_g(self, x) -> np.ndarray:
        return log_form_values(self.phi.log_eval(np.atleast_2d(x)), self.R)[0]

    def to_dict(self) -> dict:
        return {
            "phi": self.phi.to_dict(),
            "psi": self.psi.to_dict(),
            "L": self.L.L.ravel().tolist(),
            "scale_lambda": self.scale_lambda,
            "R": None if self.solution.vR is None else self.solution.vR.tolist(),
            "meta": {"n": self.n, "d": self.d, "version": MODEL_VERSION},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RationalFactorCDE":
        """Rebuild and verify; corrupted files raise :class:`ModelCorruptError`."""
        try:
            meta = data["meta"]
            n = int(meta["n"])
            phi = BetaBasis.from_dict(data["phi"])
            psi = BetaBasis.from_dict(data["psi"])
            L = np.asarray(data["L"], dtype=float).reshape(n, n)
            lam = float(data["scale_lambda"])
            R = np.asarray(data["R"], dtype=float).reshape(n, n)
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelCorruptError(f"malformed model file: {exc}") from exc
        if meta.get("version") != MODEL_VERSION:
            raise ModelCorruptError(f"unsupported model version {meta.get('version')}")
        E = cross_moment_tensor(phi, psi)
        vR = R.ravel()
        M = normalization_matrix(L.T @ L / lam, E)
        res = float(np.linalg.norm(M @ vR - vR) / np.linalg.norm(vR))
        if not res <= RESIDUAL_TOL:
            raise ModelCorruptError(f"normalization residual {res:.3e} exceeds {RESIDUAL_TOL:g}")
        if np.max(np.abs(R - R.T)) > 1e-12 or np.linalg.eigvalsh(R)[0] <= 0:
            raise ModelCorruptError("stored R is not symmetric positive definite")
        sol = NormalizationSolution(lam, vR, res, float(np.linalg.eigvalsh(R)[0]), True,
                                    M0=normalization_matrix(L.T @ L, E))
        return cls(phi, psi, PsdFactor(L), sol, E)


def uniform_model(d: int = 1) -> RationalFactorCDE:
    """n = 1 model with constant bases: ``p(x'|x) = 1`` on the unit box."""
    const = BetaBasis.constant(1, d)
    return RationalFactorCDE.build(const, const, np.array([[np.sqrt(2.0)]]))


def _require_feasible(cde: RationalFactorCDE):
    if not cde.feasible:
        raise ModelInvalidError("model is not feasible (R not PD or residual too large)")


def log_conditional(cde: RationalFactorCDE, x, x_next) -> np.ndarray:
    """``log p(x'|x)`` in log space; zero density gives -inf."""
    _require_feasible(cde)
    x = np.atleast_2d(check_interior(x))
    xn = np.atleast_2d(check_interior(x_next))
    lphi_x = cde.phi.log_eval(x)
    lphi_xn = cde.phi.log_eval(xn)
    lpsi_xn = cde.psi.log_eval(xn)
    log_gx = log_form_values(lphi_x, cde.R)[0]
    log_gxn = log_form_values(lphi_xn, cde.R)[0]
    log_f = log_form_values(lphi_x + lpsi_xn, cde.Q)[0]
    out = log_gxn + log_f - log_gx
    return out if out.size > 1 or np.ndim(x_next) > 1 else out[0]


def eval_conditional(cde: RationalFactorCDE, x, x_next):
    return np.exp(log_conditional(cde, x, x_next))


def mean_log_conditional(cde: RationalFactorCDE, x, x_next) -> tuple[float, int]:
    """Batch mean of finite log densities and the count of excluded zero-density pairs."""
    lp = np.atleast_1d(log_conditional(cde, x, x_next))
    ok = np.isfinite(lp)
    if not ok.any():
        return -np.inf, int(lp.size)
    return float(lp[ok].mean()), int((~ok).sum())


def conditional_param_count(n: int, d: int) -> int:
    return 2 * n * n + 4 * n * d


def initial_param_count(n: int, d: int) -> int:
    return n * n + 2 * n * d


def count_parameters(cde: RationalFactorCDE) -> int:
    """Full Q factor, R, and both bases' shape parameters."""
    return conditional_param_count(cde.n, cde.d)
