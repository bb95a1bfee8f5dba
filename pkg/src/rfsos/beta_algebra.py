"""Beta-kernel basis functions on the open unit box.

A basis row ``i`` is the product kernel

    b_i(x) = prod_m x_m ** (alpha[i, m] - 1) * (1 - x_m) ** (beta[i, m] - 1)

Products of kernels are kernels again (exponents add), and every kernel has a
closed-form integral over the unit box given by a product of Beta functions.
Everything else in the package is built on those two facts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import betaln

# Four kernels with exponent alpha - 1 are multiplied inside the cross-moment
# tensor, so alpha > 0.75 is the hard integrability floor.
INTEGRABILITY_FLOOR = 0.75
DEFAULT_ALPHA_MIN = 1.0
DEFAULT_ALPHA_MAX = 400.0


class DomainError(ValueError):
    """Evaluation point outside the open unit box."""


class DivergentIntegralError(ValueError):
    """Kernel exponent at or below -1 in some dimension."""


def check_interior(x) -> np.ndarray:
    """Return ``x`` as a float array, raising if any coordinate is not in (0, 1)."""
    x = np.asarray(x, dtype=float)
    if not np.all((x > 0.0) & (x < 1.0)):
        raise DomainError("points must lie strictly inside the unit box")
    return x


@dataclass(frozen=True)
class ExponentVector:
    """Monomial ``prod_m x_m**a_m (1 - x_m)**b_m``; products add exponents."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=float)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError("a and b must be d-vectors of equal length")

    def __add__(self, other: "ExponentVector") -> "ExponentVector":
        return ExponentVector(self.a + other.a, self.b + other.b)

    def __call__(self, x) -> np.ndarray:
        x = check_interior(x)
        return np.exp(np.sum(self.a * np.log(x) + self.b * np.log1p(-x), axis=-1))


def log_kernel_integral(a, b) -> np.ndarray:
    """Log of the unit-box integral of kernels with exponent arrays ``a``, ``b``.

    The last axis is the dimension axis; leading axes broadcast.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= -1.0) or np.any(b <= -1.0):
        raise DivergentIntegralError("kernel exponent <= -1: integral diverges")
    return np.sum(betaln(a + 1.0, b + 1.0), axis=-1)


def kernel_integral(e: ExponentVector) -> float:
    return float(np.exp(log_kernel_integral(e.a, e.b)))


@dataclass(frozen=True)
class BetaBasis:
    """``n`` product Beta kernels over ``d`` dimensions.

    ``frozen_constant`` names a row pinned to the constant function 1; the
    training code never moves it.
    """

    alpha: np.ndarray
    beta: np.ndarray
    frozen_constant: int | None = None
    _id: str = field(default="", init=False, repr=False, compare=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float, ndmin=2)
        beta = np.array(self.beta, dtype=float, ndmin=2)
        if alpha.shape != beta.shape or alpha.ndim != 2:
            raise ValueError("alpha and beta must both be n x d")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise ValueError("shape parameters must be finite")
        if alpha.min() <= INTEGRABILITY_FLOOR or beta.min() <= INTEGRABILITY_FLOOR:
            raise ValueError(f"shape parameters must exceed {INTEGRABILITY_FLOOR}")
        fc = self.frozen_constant
        if fc is not None:
            fc = int(fc)
            if not 0 <= fc < alpha.shape[0]:
                raise ValueError("frozen_constant index out of range")
            if not (np.all(alpha[fc] == 1.0) and np.all(beta[fc] == 1.0)):
                raise ValueError("frozen constant row must have alpha = beta = 1")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "frozen_constant", fc)
        digest = hashlib.sha1(alpha.tobytes() + beta.tobytes() + str(fc).encode())
        object.__setattr__(self, "_id", digest.hexdigest()[:12])

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    @property
    def d(self) -> int:
        return self.alpha.shape[1]

    @property
    def basis_id(self) -> str:
        return self._id

    @property
    def a(self) -> np.ndarray:
        """x-exponents, n x d."""
        return self.alpha - 1.0

    @property
    def b(self) -> np.ndarray:
        """(1 - x)-exponents, n x d."""
        return self.beta - 1.0

    def row(self, i: int) -> ExponentVector:
        return ExponentVector(self.a[i], self.b[i])

    def log_eval(self, x) -> np.ndarray:
        """Log kernel values; ``x`` is (d,) or (N, d), result (n,) or (N, n)."""
        x = check_interior(x)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected points of dimension {self.d}")
        return np.log(x) @ self.a.T + np.log1p(-x) @ self.b.T

    def eval(self, x) -> np.ndarray:
        return np.exp(self.log_eval(x))

    def with_params(self, alpha, beta) -> "BetaBasis":
        return BetaBasis(alpha, beta, self.frozen_constant)

    @classmethod
    def constant(cls, n: int, d: int) -> "BetaBasis":
        return cls(np.ones((n, d)), np.ones((n, d)), frozen_constant=0)

    @classmethod
    def random(cls, n: int, d: int, rng: np.random.Generator, low=1.0, high=20.0,
               frozen_constant: int | None = 0) -> "BetaBasis":
        """Shapes drawn log-uniform in [low, high]."""
        lo, hi = np.log(low), np.log(high)
        alpha = np.exp(rng.uniform(lo, hi, size=(n, d)))
        beta = np.exp(rng.uniform(lo, hi, size=(n, d)))
        if frozen_constant is not None:
            alpha[frozen_constant] = 1.0
            beta[frozen_constant] = 1.0
        return cls(alpha, beta, frozen_constant)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "alpha": self.alpha.ravel().tolist(),
            "beta": self.beta.ravel().tolist(),
            "frozen_constant": self.frozen_constant,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BetaBasis":
        n, d = int(data["n"]), int(data["d"])
        alpha = np.asarray(data["alpha"], dtype=float).reshape(n, d)
        beta = np.asarray(data["beta"], dtype=float).reshape(n, d)
        return cls(alpha, beta, data.get("frozen_constant"))


def gram_matrix(basis: BetaBasis) -> np.ndarray:
    """Pairwise unit-box inner products of the basis functions."""
    a = basis.a[:, None, :] + basis.a[None, :, :]
    b = basis.b[:, None, :] + basis.b[None, :, :]
    return np.exp(log_kernel_integral(a, b))


def four_way_exponents(left: BetaBasis, right: BetaBasis):
    """Summed exponents of ``l_i l_j r_k r_l``, each of shape (n, n, m, m, d)."""
    if left.d != right.d:
        raise ValueError("bases must share the state dimension")
    def pair(e):
        return e[:, None] + e[None, :]

    # pair sums first, so i<->j and k<->l swaps give bitwise-equal exponents
    a = pair(left.a)[:, :, None, None] + pair(right.a)[None, None, :, :]
    b = pair(left.b)[:, :, None, None] + pair(right.b)[None, None, :, :]
    return a, b


@dataclass(frozen=True)
class CrossMomentTensor:
    """Integrals of four-way kernel products flattened to an n^2 x m^2 matrix.

    Entry ``((i, j), (k, l))`` is the integral of ``left_i left_j right_k right_l``
    over the unit box, with row index ``i * n + j`` and column ``k * m + l``.
    """

    entries: np.ndarray
    left_basis_id: str
    right_basis_id: str

    @property
    def shape4(self) -> tuple[int, int, int, int]:
        n = int(round(np.sqrt(self.entries.shape[0])))
        m = int(round(np.sqrt(self.entries.shape[1])))
        return n, n, m, m

    def as_tensor(self) -> np.ndarray:
        return self.entries.reshape(self.shape4)

    def matches(self, left: BetaBasis, right: BetaBasis) -> bool:
        return self.left_basis_id == left.basis_id and self.right_basis_id == right.basis_id


def cross_moment_tensor(left: BetaBasis, right: BetaBasis) -> CrossMomentTensor:
    a, b = four_way_exponents(left, right)
    entries = np.exp(log_kernel_integral(a, b)).reshape(left.n ** 2, right.n ** 2)
    return CrossMomentTensor(entries, left.basis_id, right.basis_id)


def _graded_rule(points: int, levels: int, ratio: float = 0.2):
    """Composite Gauss-Legendre rule on (0, 1) with panels graded geometrically
    toward both endpoints; resolves x**a (1 - x)**b endpoint behaviour."""
    nodes, weights = leggauss(points)
    edges = [0.0] + [0.5 * ratio ** k for k in range(levels, 0, -1)] + [0.5]
    edges = np.asarray(edges)
    left = np.concatenate([edges, 1.0 - edges[-2::-1]])
    xs, ws = [], []
    for lo, hi in zip(left[:-1], left[1:]):
        xs.append(lo + 0.5 * (hi - lo) * (nodes + 1.0))
        ws.append(0.5 * (hi - lo) * weights)
    return np.concatenate(xs), np.concatenate(ws)


def quadrature_nodes(points_per_dim: int = 32, levels: int = 0):
    """1-D nodes and weights on (0, 1): plain Gauss-Legendre, or the graded
    composite rule when ``levels > 0``."""
    if levels > 0:
        return _graded_rule(points_per_dim, levels)
    nodes, weights = leggauss(points_per_dim)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def quadrature_oracle(f, d: int, points_per_dim: int = 32, levels: int = 0) -> float:
    """Tensor Gauss-Legendre estimate of the unit-box integral of ``f``.

    ``f`` receives an (P, d) array of interior nodes and returns P values.
    With ``levels > 0`` each axis uses a composite rule graded toward the
    endpoints (``points_per_dim`` nodes per panel), which keeps non-integer
    kernel exponents accurate. Test-side verification only; the analytic
    code paths never call this.
    """
    if d > 3:
        raise ValueError("quadrature oracle supports d <= 3 only")
    nodes, weights = quadrature_nodes(points_per_dim, levels)
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    wgrids = np.meshgrid(*([weights] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    w = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return float(np.sum(w * np.asarray(f(pts), dtype=float)))
