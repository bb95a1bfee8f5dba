"""Sum-of-squares quadratic forms over a Beta basis, plus the small amount of
dense linear algebra the normalization solve and the barrier loss need."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .beta_algebra import BetaBasis, gram_matrix


class NumericError(RuntimeError):
    """Recoverable numerical failure (eigen-solver breakdown, NaN state)."""


def symmetrize(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class QuadraticForm:
    """``f(x) = b(x)^T C b(x)``; ``C`` is symmetrized on construction."""

    basis: BetaBasis
    coeff: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeff, dtype=float))
        if c.shape != (self.basis.n, self.basis.n):
            raise ValueError(f"coefficient matrix must be {self.basis.n}x{self.basis.n}")
        object.__setattr__(self, "coeff", symmetrize(c))

    def to_dict(self) -> dict:
        iu = np.triu_indices(self.basis.n)
        return {"basis_id": self.basis.basis_id, "coeff": self.coeff[iu].tolist()}

    @classmethod
    def from_dict(cls, data: dict, basis: BetaBasis) -> "QuadraticForm":
        if data["basis_id"] != basis.basis_id:
            raise ValueError("quadratic form refers to a different basis")
        n = basis.n
        c = np.zeros((n, n))
        c[np.triu_indices(n)] = data["coeff"]
        return cls(basis, c + np.triu(c, 1).T)


@dataclass(frozen=True)
class PsdFactor:
    """Unconstrained factor ``L``; ``Q = L^T L`` is PSD for any ``L``."""

    L: np.ndarray

    def __post_init__(self):
        L = np.array(self.L, dtype=float, ndmin=2)  # copy: optimizers update parameters in place
        if L.shape[0] != L.shape[1]:
            raise ValueError("factor must be square")
        L.setflags(write=False)
        object.__setattr__(self, "L", L)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def Q(self) -> np.ndarray:
        return self.L.T @ self.L


def eval_form(qf: QuadraticForm, x) -> np.ndarray:
    """Value of the form at ``x`` ((d,) or (N, d))."""
    b = qf.basis.eval(x)
    return np.einsum("...i,ij,...j->...", b, qf.coeff, b)


def integrate_form(qf: QuadraticForm) -> float:
    return float(np.sum(qf.coeff * gram_matrix(qf.basis)))


def integrate_out_dependent(q: PsdFactor, phi: BetaBasis, psi: BetaBasis) -> QuadraticForm:
    """Integrate ``(phi(x) o psi(x'))^T Q (phi(x) o psi(x'))`` over ``x'``.

    The result is a form over ``phi`` with coefficients ``Gram(psi) o Q``,
    PSD by the Schur product theorem.
    """
    if not (phi.n == psi.n == q.n):
        raise ValueError("factor and bases must share n")
    return QuadraticForm(phi, gram_matrix(psi) * q.Q)


def symmetric_eigen(m, tol: float = 1e-12):
    """Ascending eigenvalues and orthonormal eigenvectors (columns)."""
    m = np.asarray(m, dtype=float)
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.ndim != 2 or m.shape[0] != m.shape[1] or np.max(np.abs(m - m.T), initial=0.0) > tol * scale:
        raise ValueError("symmetric_eigen needs a square symmetric matrix")
    return np.linalg.eigh(symmetrize(m))


def general_real_eigen(m):
    """Eigenpairs of a real (non-symmetric) matrix as ``(values, vectors)``.

    Eigenvectors are unit-norm columns. LAPACK failure surfaces as
    :class:`NumericError` so training can treat it as an infeasible step.
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite matrix passed to eigen solver")
    try:
        w, v = np.linalg.eig(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigen solver failed: {exc}") from exc
    return w, v / np.linalg.norm(v, axis=0, keepdims=True)


def log_det_pd(m) -> float | None:
    """``log det M`` via Cholesky, or ``None`` when ``M`` is not positive definite."""
    try:
        chol = np.linalg.cholesky(symmetrize(m))
    except np.linalg.LinAlgError:
        return None
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def log_form_values(log_b, coeff):
    """``log(b^T C b)`` per row of ``log_b`` (N, n), evaluated with a per-row
    max shift so large kernel exponents neither overflow nor underflow.

    Returns ``(log_value, b_scaled, value_scaled)`` where ``b_scaled`` is
    ``exp(log_b - shift)`` and ``value_scaled = b_scaled^T C b_scaled``; the
    last two are what gradient code needs. Non-positive values map to -inf.
    """
    log_b = np.atleast_2d(log_b)
    shift = np.max(log_b, axis=1, keepdims=True)
    b = np.exp(log_b - shift)
    val = np.einsum("ni,ij,nj->n", b, coeff, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(val > 0.0, np.log(np.where(val > 0.0, val, 1.0)) + 2.0 * shift[:, 0], -np.inf)
    return out, b, val
