"""Two identical, non-interacting oscillators with their angular momentum measured.

Measuring ``M_z = x1 p2 - x2 p1`` exchanges energy between the oscillators
although they do not interact.  Second moments obey a closed linear ODE
that is generated here symbolically, by applying the Hamiltonian bracket
and the squared rotation generator

    G = x2 d/dx1 - x1 d/dx2 + p2 d/dp1 - p1 d/dp2

to each quadratic monomial.  Variables are ordered ``y = (x1, p1, x2, p2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .dsl import Const, Mul, ObservableExpr, Var, _add, _mul, differentiate, evaluate, parse_observable
from .phase import bracket

__all__ = [
    "OscillatorPair", "SecondMoments4", "GibbsParams", "AdmissibilityError",
    "MONOMIALS", "hamiltonian", "angular_momentum", "rotation_generator",
    "moment_generator_matrix", "second_moment_rhs", "evolve_moments",
    "energy_relaxation", "stationary_moments", "beta_matrices", "gibbs_parameters",
]

ANGULAR_MOMENTUM = "x1*p2 - x2*p1"

# Upper-triangle index pairs of the symmetric 4x4 moment matrix.
MONOMIALS: tuple[tuple[int, int], ...] = tuple((a, b) for a in range(4) for b in range(a, 4))


class AdmissibilityError(ValueError):
    """(E, M) violates the positivity bound ``|M| < 2 E / omega0``."""


@dataclass(frozen=True)
class OscillatorPair:
    m: float = 1.0
    k: float = 1.0
    kappa: float = 0.0

    def __post_init__(self):
        if not (self.m > 0 and math.isfinite(self.m)):
            raise ValueError(f"mass must be positive, got {self.m!r}")
        if not (self.k > 0 and math.isfinite(self.k)):
            raise ValueError(f"stiffness must be positive, got {self.k!r}")
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be non-negative, got {self.kappa!r}")

    @property
    def omega0(self) -> float:
        return math.sqrt(self.k / self.m)

    def max_angular_momentum(self, E: float) -> float:
        return 2.0 * E / self.omega0

    def check_admissible(self, E: float, M: float) -> None:
        if not E > 0:
            raise AdmissibilityError(f"energy per oscillator must be positive, got E={E:g}")
        bound = self.max_angular_momentum(E)
        if not abs(M) < bound:
            raise AdmissibilityError(
                f"|M| = {abs(M):g} must be below 2E/omega0 = {bound:g} "
                f"(m E^2/k - M^2/4 = {self.m * E * E / self.k - M * M / 4:g} must be > 0)")


def _var(name: str) -> Var:
    return Var(name[0], int(name[1]))


def hamiltonian(pair: OscillatorPair) -> ObservableExpr:
    m, k = repr(float(pair.m)), repr(float(pair.k))
    return parse_observable(
        f"p1^2/(2*{m}) + {k}*x1^2/2 + p2^2/(2*{m}) + {k}*x2^2/2", 2)


def angular_momentum() -> ObservableExpr:
    return parse_observable(ANGULAR_MOMENTUM, 2)


def rotation_generator(f: ObservableExpr) -> ObservableExpr:
    """``G f = x2 df/dx1 - x1 df/dx2 + p2 df/dp1 - p1 df/dp2``."""
    q1, p1, q2, p2 = (_var(s) for s in ("q1", "p1", "q2", "p2"))
    terms = [
        _mul(q2, differentiate(f, q1).root),
        Mul(Const(-1.0), _mul(q1, differentiate(f, q2).root)),
        _mul(p2, differentiate(f, p1).root),
        Mul(Const(-1.0), _mul(p1, differentiate(f, p2).root)),
    ]
    total = Const(0.0)
    for t in terms:
        total = _add(total, t)
    return ObservableExpr(total, 2)


def _monomial(a: int, b: int) -> ObservableExpr:
    va = Var("p" if a % 2 else "q", a // 2 + 1)
    vb = Var("p" if b % 2 else "q", b // 2 + 1)
    return ObservableExpr(Mul(va, vb), 2)


def _quadratic_coefficients(expr: ObservableExpr) -> np.ndarray:
    """Coefficients of a homogeneous quadratic on the 10 monomials, read off by polarization."""
    basis = np.eye(4)
    diag = [evaluate(expr, basis[a]) for a in range(4)]
    out = np.empty(len(MONOMIALS))
    for n, (a, b) in enumerate(MONOMIALS):
        if a == b:
            out[n] = diag[a]
        else:
            out[n] = evaluate(expr, basis[a] + basis[b]) - diag[a] - diag[b]
    return out


@lru_cache(maxsize=64)
def _generator_parts(m: float, k: float) -> tuple[np.ndarray, np.ndarray]:
    pair = OscillatorPair(m, k)
    H = hamiltonian(pair)
    MH = np.empty((10, 10))
    MG = np.empty((10, 10))
    for n, (a, b) in enumerate(MONOMIALS):
        A = _monomial(a, b)
        MH[n] = _quadratic_coefficients(bracket(A, H))
        MG[n] = _quadratic_coefficients(rotation_generator(rotation_generator(A)))
    MH.setflags(write=False)
    MG.setflags(write=False)
    return MH, MG


def moment_generator_matrix(pair: OscillatorPair) -> np.ndarray:
    """10x10 matrix ``R`` with ``d s/dt = R s`` for the raw moment vector ``s``."""
    MH, MG = _generator_parts(float(pair.m), float(pair.k))
    return MH + pair.kappa * MG


@dataclass(frozen=True)
class SecondMoments4:
    """Raw second moments ``<y_a y_b>`` over ``y = (x1, p1, x2, p2)``."""

    matrix: np.ndarray

    def __post_init__(self):
        S = np.array(self.matrix, dtype=float)
        if S.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {S.shape}")
        if np.abs(S - S.T).max() > 1e-12 * (1 + np.abs(S).max()):
            raise ValueError("moment matrix must be symmetric")
        S = 0.5 * (S + S.T)
        S.setflags(write=False)
        object.__setattr__(self, "matrix", S)

    @classmethod
    def from_vector(cls, v) -> "SecondMoments4":
        v = np.asarray(v, dtype=float)
        S = np.empty((4, 4))
        for n, (a, b) in enumerate(MONOMIALS):
            S[a, b] = S[b, a] = v[n]
        return cls(S)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.matrix[a, b] for a, b in MONOMIALS])

    def __getitem__(self, key: str) -> float:
        """Moment by name, e.g. ``s["x1p2"]`` or ``s["p1p1"]``."""
        names = {"x1": 0, "q1": 0, "p1": 1, "x2": 2, "q2": 2, "p2": 3}
        if len(key) != 4 or key[:2] not in names or key[2:] not in names:
            raise KeyError(key)
        return float(self.matrix[names[key[:2]], names[key[2:]]])

    def energies(self, pair: OscillatorPair) -> tuple[float, float]:
        S = self.matrix
        E1 = S[1, 1] / (2 * pair.m) + pair.k * S[0, 0] / 2
        E2 = S[3, 3] / (2 * pair.m) + pair.k * S[2, 2] / 2
        return float(E1), float(E2)

    @property
    def angular_momentum(self) -> float:
        return float(self.matrix[0, 3] - self.matrix[2, 1])


def second_moment_rhs(pair: OscillatorPair, s: SecondMoments4) -> SecondMoments4:
    """Time derivative of every second moment under Hamiltonian flow plus measurement."""
    return SecondMoments4.from_vector(moment_generator_matrix(pair) @ s.vector)


def evolve_moments(pair: OscillatorPair, s0: SecondMoments4, times) -> list[SecondMoments4]:
    """Exact solution of the moment ODE at each of ``times`` (matrix exponential)."""
    R = moment_generator_matrix(pair)
    return [SecondMoments4.from_vector(expm(R * t) @ s0.vector) for t in np.atleast_1d(times)]


def energy_relaxation(E1_0: float, E2_0: float, kappa: float, t: float) -> tuple[float, float]:
    """Mean oscillator energies at time ``t``; the gap decays as ``exp(-4 kappa t)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    mean = 0.5 * (E1_0 + E2_0)
    gap = (E1_0 - mean) * math.exp(-4.0 * kappa * t)
    return mean + gap, mean - gap


def stationary_moments(E: float, M: float, pair: OscillatorPair) -> SecondMoments4:
    """Stationary moments at energy ``E`` per oscillator and mean angular momentum ``M``.

    ``<p_i^2> = m E``, ``<x_i^2> = E / k``, ``<x1 p2> = M/2``,
    ``<x2 p1> = -M/2``, all other cross moments zero.
    """
    pair.check_admissible(E, M)
    return SecondMoments4(_beta_inverse(E, M, pair))


def _beta_inverse(E: float, M: float, pair: OscillatorPair) -> np.ndarray:
    xx, pp, h = E / pair.k, pair.m * E, M / 2.0
    return np.array([
        [xx, 0.0, 0.0, h],
        [0.0, pp, -h, 0.0],
        [0.0, -h, xx, 0.0],
        [h, 0.0, 0.0, pp],
    ])


def beta_matrices(E: float, M: float, pair: OscillatorPair) -> tuple[np.ndarray, np.ndarray]:
    """Stationary covariance and its inverse (the entropy matrix), both closed form.

    Raises :class:`AdmissibilityError` on or beyond the bound, and
    ``ArithmeticError`` if the product deviates from the identity by more
    than ``1e-10``.
    """
    pair.check_admissible(E, M)
    binv = _beta_inverse(E, M, pair)
    den = pair.m * E * E / pair.k - M * M / 4.0
    xx, pp, h = pair.m * E, E / pair.k, M / 2.0
    beta = np.array([
        [xx, 0.0, 0.0, -h],
        [0.0, pp, h, 0.0],
        [0.0, h, xx, 0.0],
        [-h, 0.0, 0.0, pp],
    ]) / den
    if np.abs(beta @ binv - np.eye(4)).max() > 1e-10:
        raise ArithmeticError("entropy matrix is not the inverse of the covariance")
    return binv, beta


@dataclass(frozen=True)
class GibbsParams:
    beta: float
    Omega: float
    KT_eff: float
    E: float
    M: float
    omega0: float

    def effective_energy(self, pair: OscillatorPair, y) -> np.ndarray:
        """``beta (H - Omega M_z)`` at points ``y`` of shape ``(..., 4)``."""
        y = np.asarray(y, dtype=float)
        x1, p1, x2, p2 = np.moveaxis(y, -1, 0)
        H = (p1 ** 2 + p2 ** 2) / (2 * pair.m) + pair.k * (x1 ** 2 + x2 ** 2) / 2
        Mz = x1 * p2 - x2 * p1
        return self.beta * (H - self.Omega * Mz)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "Omega": self.Omega, "KT_eff": self.KT_eff,
                "E": self.E, "M": self.M, "omega0": self.omega0}


def gibbs_parameters(E: float, M: float, pair: OscillatorPair) -> GibbsParams:
    """Inverse temperature, rotation rate and effective temperature of the stationary state.

    The stationary density is ``exp(-beta (H - Omega M_z))`` with
    ``beta = (E / w0^2) / (m E^2 / k - M^2 / 4)``, ``Omega = M w0^2 / (2 E)``
    and ``KT_eff = E - M^2 w0^2 / (4 E)``.
    """
    pair.check_admissible(E, M)
    w2 = pair.k / pair.m
    den = pair.m * E * E / pair.k - M * M / 4.0
    return GibbsParams(
        beta=(E / w2) / den,
        Omega=M * w2 / (2.0 * E),
        KT_eff=E - M * M * w2 / (4.0 * E),
        E=E, M=M, omega0=math.sqrt(w2),
    )
