"""Stationary statistics of linear systems driven by measurement noise.

For ``dx/dt = A x`` with diffusion ``D`` (coupling already included) the
stationary density is Gaussian with covariance ``X`` solving

    A X + X A' = -2 D.

This module gives the general ``N x N`` solve, the explicit 2x2 moments,
the kinetic matrix ``L = -A X`` with its fluctuation relation
``L + L' = 2 D``, the Onsager residual, the correlation coefficient and the
frozen ("Zeno") stationary state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "NotHurwitzError", "LinearSystem2", "DiffusionMatrix2", "StationaryMoments2", "ZenoState",
    "solve_lyapunov", "covariance_formula", "closed_form_moments", "kinetic_matrix",
    "kinetic_matrix_formula", "onsager_residual", "correlation_coefficient",
    "frozen_determinant", "zeno_stationary", "is_hurwitz",
]


class NotHurwitzError(ValueError):
    """Drift matrix has an eigenvalue with non-negative real part."""


def is_hurwitz(A) -> bool:
    A = np.asarray(A, dtype=float)
    if A.shape == (2, 2):
        return A[0, 0] + A[1, 1] < 0 and A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0] > 0
    return bool(np.all(np.linalg.eigvals(A).real < 0))


def solve_lyapunov(A, Dm) -> np.ndarray:
    """Solve ``A X + X A' = -2 Dm`` for symmetric ``X``.

    Uses the Kronecker form ``(I (x) A + A (x) I) vec(X) = -2 vec(Dm)`` and
    checks the residual ``||A X + X A' + 2 Dm||_inf < 1e-10 (1 + ||X||_inf)``.

    Raises
    ------
    NotHurwitzError
        If ``A`` is not Hurwitz (for 2x2: trace < 0 and det > 0).
    numpy.linalg.LinAlgError
        If the linear system is singular or the residual check fails.
    """
    A = np.asarray(A, dtype=float)
    Dm = np.asarray(Dm, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or Dm.shape != (n, n):
        raise ValueError(f"shape mismatch: A {A.shape}, Dm {Dm.shape}")
    if not np.allclose(Dm, Dm.T, rtol=0, atol=1e-12 * (1 + np.abs(Dm).max())):
        raise ValueError("diffusion matrix must be symmetric")
    if not is_hurwitz(A):
        raise NotHurwitzError("drift matrix is not Hurwitz (need trace < 0 and det > 0)")
    eye = np.eye(n)
    K = np.kron(eye, A) + np.kron(A, eye)
    # column-major vec: vec(A X) = (I kron A) vec(X), vec(X A') = (A kron I) vec(X)
    vecX = np.linalg.solve(K, -2.0 * Dm.reshape(-1, order="F"))
    X = vecX.reshape(n, n, order="F")
    X = 0.5 * (X + X.T)
    resid = np.abs(A @ X + X @ A.T + 2.0 * Dm).max()
    if resid >= 1e-10 * (1.0 + np.abs(X).max()):
        raise np.linalg.LinAlgError(f"Lyapunov residual {resid:.3g} too large")
    return X


# Sign of the D term in the 2x2 matrix formula below.  With a plus sign the
# formula gives -4 D for A = -I instead of D, violating A X + X A' = -2 D.
FORMULA_D_TERM_SIGN = -1.0


def covariance_formula(A, Dm) -> np.ndarray:
    """Closed-form 2x2 stationary covariance via Cayley-Hamilton.

    ``X = s (t^2 + d)/(t d) D + (A D + D A')/d - A D A'/(t d)`` with
    ``t = tr A``, ``d = det A`` and ``s = FORMULA_D_TERM_SIGN``.
    """
    A = np.asarray(A, dtype=float)
    Dm = np.asarray(Dm, dtype=float)
    t = A[0, 0] + A[1, 1]
    d = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    return (FORMULA_D_TERM_SIGN * (t * t + d) / (t * d) * Dm
            + (A @ Dm + Dm @ A.T) / d
            - (A @ Dm @ A.T) / (t * d))


@dataclass(frozen=True)
class LinearSystem2:
    """Drift matrix ``[[a, b], [c, d]]``; must be Hurwitz."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        for name in "abcd":
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.trace < 0:
            raise NotHurwitzError(f"trace a + d = {self.trace:g} must be negative")
        if not self.det > 0:
            raise NotHurwitzError(f"determinant ad - bc = {self.det:g} must be positive")

    @classmethod
    def from_matrix(cls, A) -> "LinearSystem2":
        A = np.asarray(A, dtype=float)
        if A.shape != (2, 2):
            raise ValueError(f"expected a 2x2 matrix, got shape {A.shape}")
        return cls(A[0, 0], A[0, 1], A[1, 0], A[1, 1])

    @property
    def trace(self) -> float:
        return self.a + self.d

    @property
    def det(self) -> float:
        return self.a * self.d - self.b * self.c

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]])


@dataclass(frozen=True)
class DiffusionMatrix2:
    """Effective diffusion ``[[D1, D], [D, D2]]`` (coupling included).

    With ``rank_one=True`` the measurement constraint ``D1 D2 - D^2 = 0`` is
    asserted to a relative tolerance of ``1e-10``.
    """

    D1: float
    D2: float
    D: float
    rank_one: bool = False

    def __post_init__(self):
        if self.D1 < 0 or self.D2 < 0:
            raise ValueError("diagonal diffusion entries must be non-negative")
        scale = max(self.D1 * self.D2, self.D * self.D)
        det = self.D1 * self.D2 - self.D * self.D
        if det < -1e-12 * scale:
            raise ValueError(f"diffusion matrix is not positive semidefinite (det={det:g})")
        if self.rank_one and abs(det) > 1e-10 * scale:
            raise ValueError(f"measurement diffusion must have zero determinant, got {det:g}")

    @classmethod
    def from_matrix(cls, Dm, rank_one: bool = False) -> "DiffusionMatrix2":
        Dm = np.asarray(Dm, dtype=float)
        if Dm.shape != (2, 2) or abs(Dm[0, 1] - Dm[1, 0]) > 1e-12 * (1 + np.abs(Dm).max()):
            raise ValueError("expected a symmetric 2x2 matrix")
        return cls(Dm[0, 0], Dm[1, 1], Dm[0, 1], rank_one)

    @classmethod
    def from_noise_vector(cls, w, kappa: float = 1.0) -> "DiffusionMatrix2":
        """``kappa * w w'`` for a 2-vector ``w``: the rank-1 measurement case."""
        w = np.asarray(w, dtype=float)
        return cls(kappa * w[0] * w[0], kappa * w[1] * w[1], kappa * w[0] * w[1], rank_one=True)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.D1, self.D], [self.D, self.D2]])

    @property
    def det(self) -> float:
        return self.D1 * self.D2 - self.D * self.D


@dataclass(frozen=True)
class StationaryMoments2:
    """Stationary second moments ``m11 = <x1^2>``, ``m12 = <x1 x2>``, ``m22 = <x2^2>``."""

    m11: float
    m12: float
    m22: float

    @property
    def covariance(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m12, self.m22]])

    @property
    def det(self) -> float:
        return self.m11 * self.m22 - self.m12 * self.m12

    @cached_property
    def entropy_matrix(self) -> np.ndarray | None:
        """Inverse covariance ``beta``, or None when a coordinate is frozen."""
        scale = max(self.m11 * self.m22, self.m12 * self.m12)
        if scale == 0 or abs(self.det) <= 1e-14 * scale:
            return None
        return np.linalg.inv(self.covariance)

    @property
    def eta(self) -> float | None:
        return correlation_coefficient(self)


def closed_form_moments(sys: LinearSystem2, Dm: DiffusionMatrix2) -> StationaryMoments2:
    """Explicit rational expressions for the 2x2 stationary moments."""
    a, b, c, d = sys.a, sys.b, sys.c, sys.d
    D1, D2, D = Dm.D1, Dm.D2, Dm.D
    den = (a + d) * (a * d - b * c)
    m11 = ((b * c - a * d - d * d) * D1 + 2 * b * d * D - b * b * D2) / den
    m12 = (c * d * D1 - 2 * a * d * D + a * b * D2) / den
    m22 = (-c * c * D1 + 2 * a * c * D + (b * c - a * a - a * d) * D2) / den
    return StationaryMoments2(m11, m12, m22)


def kinetic_matrix_formula(sys: LinearSystem2, Dm: DiffusionMatrix2) -> np.ndarray:
    """``L = D + (A D - D A') / tr A``."""
    A, D = sys.matrix, Dm.matrix
    return D + (A @ D - D @ A.T) / sys.trace


def kinetic_matrix(sys: LinearSystem2, Dm: DiffusionMatrix2, tol: float = 1e-10) -> np.ndarray:
    """Kinetic matrix ``L = -A X`` linking flows ``dx/dt`` to forces ``-beta x``.

    Computed from the Lyapunov solution and cross-checked against
    :func:`kinetic_matrix_formula`; raises ``ArithmeticError`` if they differ
    by more than ``tol * (1 + max|L|)``.
    """
    L = -sys.matrix @ solve_lyapunov(sys.matrix, Dm.matrix)
    L2 = kinetic_matrix_formula(sys, Dm)
    if np.abs(L - L2).max() > tol * (1.0 + np.abs(L).max()):
        raise ArithmeticError("kinetic matrix formula disagrees with the Lyapunov solution")
    return L


def onsager_residual(sys: LinearSystem2, Dm: DiffusionMatrix2) -> float:
    """``b D2 - c D1 + (a - d) D``; zero exactly when ``L`` is symmetric."""
    return sys.b * Dm.D2 - sys.c * Dm.D1 + (sys.a - sys.d) * Dm.D


def frozen_determinant(sys: LinearSystem2, Dm: DiffusionMatrix2) -> float:
    """``det(X)`` predicted from the Onsager residual: ``r^2 / (tr(A)^2 det(A))``.

    Valid for rank-1 diffusion; it vanishes exactly when ``L`` is symmetric.
    """
    r = onsager_residual(sys, Dm)
    return r * r / (sys.trace ** 2 * sys.det)


def correlation_coefficient(m: StationaryMoments2) -> float | None:
    """``m12 / sqrt(m11 m22)``, or None when a coordinate is frozen (``m11 m22 == 0``).

    The None case is the ``|eta| = 1`` limit: the measured combination has
    collapsed to a point.
    """
    prod = m.m11 * m.m22
    if prod <= 0.0:
        return None
    return m.m12 / math.sqrt(prod)


@dataclass(frozen=True)
class ZenoState:
    """Stationary density ``delta(O) * N(O~; 0, variance)`` in measured coordinates."""

    frozen_value: float
    conjugate_variance: float

    @property
    def normalization(self) -> float:
        return 1.0 / math.sqrt(2.0 * math.pi * self.conjugate_variance)

    def conjugate_density(self, o_tilde) -> np.ndarray:
        o_tilde = np.asarray(o_tilde, dtype=float)
        return self.normalization * np.exp(-0.5 * o_tilde ** 2 / self.conjugate_variance)


def zeno_stationary(a: float, b: float, c: float, d: float, kappa: float = 1.0) -> ZenoState:
    """Stationary state for drift ``[[a, b], [c, d]]`` in ``(O, O~)`` with ``D = kappa diag(0, 1)``.

    Requires ``b == 0`` (no feedback of ``O~`` into ``O``), ``a < 0`` and
    ``d < 0``.  ``O`` collapses to 0 and ``O~`` is Gaussian with variance
    ``kappa / |d|``.
    """
    if b != 0:
        raise ValueError(f"frozen stationary state requires b = 0, got b = {b:g}")
    if not (a < 0 and d < 0):
        raise NotHurwitzError("need a < 0 and d < 0")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return ZenoState(frozen_value=0.0, conjugate_variance=kappa / abs(d))
