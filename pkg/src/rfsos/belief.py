"""Analytic belief propagation for rational-factor models.

A belief is ``p_k(x) = g(x) h_k(x) exp(-log_Z)`` where ``g`` is the model's
factor over ``phi`` and ``h_k`` is a quadratic form over ``chi`` at step 0 and
over ``psi`` afterwards. One step maps the coefficient matrix ``H`` to
``Q o mat(E vec H)`` where ``E`` is the (phi, h-basis) cross-moment tensor; the
size of ``H`` never changes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betaln

from .beta_algebra import BetaBasis, CrossMomentTensor, check_interior, cross_moment_tensor, four_way_exponents
from .quadratic_forms import log_form_values, symmetrize
from .rf_cde import ModelInvalidError, RationalFactorCDE

log = logging.getLogger(__name__)

MASS_DRIFT_TOL = 1e-6


@dataclass(frozen=True)
class Belief:
    phi: BetaBasis
    R: np.ndarray
    h_basis: BetaBasis
    H: np.ndarray
    step: int = 0
    log_Z: float = 0.0

    def __post_init__(self):
        H = symmetrize(self.H)
        if H.shape != (self.h_basis.n, self.h_basis.n):
            raise ValueError("H does not match the h basis")
        object.__setattr__(self, "H", H)

    def to_dict(self) -> dict:
        return {"step": self.step, "h_basis": self.h_basis.to_dict(),
                "H": self.H.ravel().tolist(), "log_Z": self.log_Z}

    @classmethod
    def from_dict(cls, data: dict, cde: RationalFactorCDE) -> "Belief":
        hb = BetaBasis.from_dict(data["h_basis"])
        H = np.asarray(data["H"], dtype=float).reshape(hb.n, hb.n)
        return cls(cde.phi, cde.R, hb, H, int(data["step"]), float(data["log_Z"]))


@dataclass
class PropagationEngine:
    """Holds the model and the two cross-moment tensors propagation needs."""

    cde: RationalFactorCDE
    chi: BetaBasis
    E_init: CrossMomentTensor = field(init=False, repr=False)

    def __post_init__(self):
        if not self.cde.feasible:
            raise ModelInvalidError("cannot propagate through an infeasible model")
        if self.chi.d != self.cde.d:
            raise ValueError("initial basis dimension does not match the model")
        self.E_init = cross_moment_tensor(self.cde.phi, self.chi)

    @property
    def E_step(self) -> CrossMomentTensor:
        return self.cde.E

    def tensor_for(self, b: Belief) -> CrossMomentTensor:
        if self.E_step.matches(self.cde.phi, b.h_basis):
            return self.E_step
        if self.E_init.matches(self.cde.phi, b.h_basis):
            return self.E_init
        raise ValueError("belief basis matches neither the initial nor the transition basis")

    def initial_belief(self, H0) -> Belief:
        return normalize(Belief(self.cde.phi, self.cde.R, self.chi, H0, 0, 0.0), self)


def integrate_belief(b: Belief, engine: PropagationEngine) -> float:
    """Exact mass ``vec(R)^T E vec(H) exp(-log_Z)``."""
    E = engine.tensor_for(b)
    return float(b.R.ravel() @ E.entries @ b.H.ravel() * np.exp(-b.log_Z))


def normalize(b: Belief, engine: PropagationEngine) -> Belief:
    mass = integrate_belief(b, engine)
    if not mass > 0:
        raise ValueError(f"belief has non-positive mass {mass}")
    return replace(b, H=b.H * np.exp(-b.log_Z) / mass, log_Z=0.0)


def propagate(b: Belief, engine: PropagationEngine, renormalize: bool = True) -> Belief:
    """One analytic step. Mass is conserved by construction; drift above
    ``MASS_DRIFT_TOL`` is logged and, if ``renormalize``, corrected."""
    E = engine.tensor_for(b)
    Q = engine.cde.Q
    H_next = Q * (E.entries @ b.H.ravel()).reshape(Q.shape) * np.exp(-b.log_Z)
    out = Belief(engine.cde.phi, engine.cde.R, engine.cde.psi, H_next, b.step + 1, 0.0)
    mass = integrate_belief(out, engine)
    if abs(mass - 1.0) > MASS_DRIFT_TOL:
        log.warning("mass drift %.3e at step %d%s", mass - 1.0, out.step,
                    "; renormalizing" if renormalize else "")
        if renormalize:
            out = normalize(out, engine)
    return out


def propagate_many(b0: Belief, engine: PropagationEngine, steps: int, renormalize: bool = True) -> list[Belief]:
    beliefs = [b0]
    for _ in range(steps):
        beliefs.append(propagate(beliefs[-1], engine, renormalize))
    return beliefs


def eval_belief(b: Belief, x) -> np.ndarray:
    """Density at ``x`` ((d,) or (N, d)); ``h`` may be slightly negative from
    rounding at steps k >= 1, so the value is computed with its sign."""
    xs = np.atleast_2d(check_interior(x))
    lg = log_form_values(b.phi.log_eval(xs), b.R)[0]
    lh = b.h_basis.log_eval(xs)
    shift = np.max(lh, axis=1)
    c = np.exp(lh - shift[:, None])
    h_scaled = np.einsum("ni,ij,nj->n", c, b.H, c)
    with np.errstate(over="ignore", under="ignore"):
        out = np.exp(lg + 2.0 * shift - b.log_Z) * h_scaled
    return out if np.ndim(x) > 1 else out[0]


def log_eval_belief(b: Belief, x) -> np.ndarray:
    v = eval_belief(b, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf)


def _term_weights(b: Belief):
    """``R_ij H_kl`` over (i, j, k, l) together with the summed exponents."""
    A, B = four_way_exponents(b.phi, b.h_basis)
    T = b.R[:, :, None, None] * b.H[None, None, :, :] * np.exp(-b.log_Z)
    return T, A, B


def marginal_grid(b: Belief, dims: tuple[int, int], grid) -> np.ndarray:
    """Exact pairwise marginal on a tensor grid.

    ``grid`` is either one 1-D array of interior coordinates used for both
    axes or a pair of such arrays; entry ``[i, j]`` is the density at
    ``(grid0[i], grid1[j])`` with all other dimensions integrated out.
    """
    d = b.phi.d
    i0, i1 = dims
    if d < 2 or not (0 <= i0 < d and 0 <= i1 < d) or i0 == i1:
        raise ValueError(f"dims {dims} invalid for a {d}-dimensional belief")
    g0, g1 = (grid, grid) if np.ndim(grid) == 1 else grid
    g0 = check_interior(np.asarray(g0, dtype=float))
    g1 = check_interior(np.asarray(g1, dtype=float))

    T, A, B = _term_weights(b)
    rest = [m for m in range(d) if m not in (i0, i1)]
    if rest:
        T = T * np.exp(np.sum(betaln(A[..., rest] + 1.0, B[..., rest] + 1.0), axis=-1))
    n, m = b.phi.n, b.h_basis.n
    U, V = np.meshgrid(g0, g1, indexing="ij")
    pts = np.full((U.size, d), 0.5)
    pts[:, i0] = U.ravel()
    pts[:, i1] = V.ravel()
    keep = [i0, i1]
    phi_p = BetaBasis(b.phi.alpha[:, keep], b.phi.beta[:, keep]).eval(pts[:, keep])
    h_p = BetaBasis(b.h_basis.alpha[:, keep], b.h_basis.beta[:, keep]).eval(pts[:, keep])
    hh = (h_p[:, :, None] * h_p[:, None, :]).reshape(-1, m * m)
    inner = hh @ T.reshape(n * n, m * m).T
    pp = (phi_p[:, :, None] * phi_p[:, None, :]).reshape(-1, n * n)
    return np.sum(inner * pp, axis=1).reshape(U.shape)


def moments(b: Belief) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and variance from closed-form Beta integrals."""
    T, A, B = _term_weights(b)
    base = np.exp(np.sum(betaln(A + 1.0, B + 1.0), axis=-1)) * T
    mass = base.sum()
    r1 = (A + 1.0) / (A + B + 2.0)
    r2 = r1 * (A + 2.0) / (A + B + 3.0)
    m1 = np.einsum("ijkl,ijklm->m", base, r1) / mass
    m2 = np.einsum("ijkl,ijklm->m", base, r2) / mass
    return m1, m2 - m1 ** 2
