"""Canonical phase-space machinery for measured observables.

Measuring an observable ``O`` adds the generator ``kappa * {O, {O, f}}`` to
the Liouville equation.  That generator is a diffusion with rank-1 tensor
``D = w w^T`` where ``w`` is the Hamiltonian vector field of ``O``::

    w = ({q1, O}, {p1, O}, ..., {qn, O}, {pn, O})
      = (dO/dp1, -dO/dq1, ..., dO/dpn, -dO/dqn)

Everything here returns unscaled geometric objects; ``kappa`` multiplies
only where an SDE or Fokker-Planck operator is assembled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .dsl import (
    Const, ObservableExpr, Var,
    _add, _mul, _neg, _sub, differentiate, evaluate, evaluate_batch, parse_observable,
)

__all__ = [
    "as_phase_point", "MeasurementSpec", "poisson_bracket", "bracket",
    "noise_field", "noise_vector", "diffusion_tensor", "ito_drift_correction",
    "measurement_kernel", "conjugate_variable", "symplectic_matrix", "field_batch",
]


def as_phase_point(point, dim: int | None = None) -> np.ndarray:
    """Validate a phase point: even positive length, finite entries."""
    x = np.asarray(point, dtype=float).ravel()
    if x.size == 0 or x.size % 2:
        raise ValueError(f"phase point must have even positive length, got {x.size}")
    if dim is not None and x.size != dim:
        raise ValueError(f"phase point has dimension {x.size}, expected {dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("phase point has non-finite entries")
    return x


def symplectic_matrix(n_dof: int) -> np.ndarray:
    """Block-diagonal ``eps`` with blocks ``[[0, 1], [-1, 0]]``."""
    return np.kron(np.eye(n_dof), np.array([[0.0, 1.0], [-1.0, 0.0]]))


@dataclass(frozen=True)
class MeasurementSpec:
    """A measured observable and its coupling ``kappa`` (>= 0)."""

    observable: ObservableExpr
    kappa: float

    def __post_init__(self):
        if isinstance(self.observable, str):
            raise TypeError("observable must be parsed; use MeasurementSpec.from_text")
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be finite and non-negative, got {self.kappa!r}")

    @classmethod
    def from_text(cls, text: str, n_dof: int, kappa: float) -> "MeasurementSpec":
        return cls(parse_observable(text, n_dof), float(kappa))

    @property
    def dim(self) -> int:
        return self.observable.dim

    @cached_property
    def field(self) -> tuple[ObservableExpr, ...]:
        return noise_field(self.observable)

    @cached_property
    def drift_correction_field(self) -> tuple[ObservableExpr, ...]:
        return _divergence_field(self.field)


def _same_dof(a: ObservableExpr, b: ObservableExpr) -> int:
    if a.n_dof != b.n_dof:
        raise ValueError(f"observables disagree on n_dof ({a.n_dof} vs {b.n_dof})")
    return a.n_dof


def bracket(a: ObservableExpr, b: ObservableExpr) -> ObservableExpr:
    """Symbolic Poisson bracket ``{a, b} = sum_i da/dq_i db/dp_i - da/dp_i db/dq_i``."""
    n = _same_dof(a, b)
    total = Const(0.0)
    for i in range(1, n + 1):
        q, p = Var("q", i), Var("p", i)
        term = _sub(
            _mul(differentiate(a, q).root, differentiate(b, p).root),
            _mul(differentiate(a, p).root, differentiate(b, q).root),
        )
        total = _add(total, term)
    return ObservableExpr(total, n)


def poisson_bracket(a: ObservableExpr, b: ObservableExpr, point) -> float:
    """Value of ``{a, b}`` at ``point``, from exact symbolic gradients."""
    n = _same_dof(a, b)
    x = as_phase_point(point, 2 * n)
    return evaluate(bracket(a, b), x)


def noise_field(observable: ObservableExpr) -> tuple[ObservableExpr, ...]:
    """Components of the Hamiltonian vector field of ``observable``, symbolically."""
    comps = []
    for i in range(1, observable.n_dof + 1):
        comps.append(differentiate(observable, Var("p", i)))
        comps.append(ObservableExpr(_neg(differentiate(observable, Var("q", i)).root), observable.n_dof))
    return tuple(comps)


def noise_vector(observable: ObservableExpr, point) -> np.ndarray:
    """``w(x)`` such that the measurement diffusion tensor is ``w w^T``.

    The flow ``dx/dt = w(x)`` is the Hamiltonian flow of ``observable`` and
    therefore conserves it.
    """
    x = as_phase_point(point, observable.dim)
    return np.array([evaluate(c, x) for c in noise_field(observable)])


def diffusion_tensor(observable: ObservableExpr, point) -> np.ndarray:
    """Rank-1 symmetric PSD tensor ``w w^T`` (without the coupling ``kappa``)."""
    w = noise_vector(observable, point)
    return np.outer(w, w)


def _divergence_field(field: tuple[ObservableExpr, ...]) -> tuple[ObservableExpr, ...]:
    # B_i = sum_k d(w_i w_k)/dx_k, differentiated in closed form.
    n = field[0].n_dof
    out = []
    for wi in field:
        total = Const(0.0)
        for k, wk in enumerate(field):
            entry = ObservableExpr(_mul(wi.root, wk.root), n)
            total = _add(total, differentiate(entry, k).root)
        out.append(ObservableExpr(total, n))
    return tuple(out)


def ito_drift_correction(spec: MeasurementSpec, point) -> np.ndarray:
    """Itô drift induced by measurement, ``B_i = kappa * sum_k dD_ik/dx_k``."""
    x = as_phase_point(point, spec.dim)
    return spec.kappa * np.array([evaluate(b, x) for b in spec.drift_correction_field])


def field_batch(field: tuple[ObservableExpr, ...], X: np.ndarray) -> np.ndarray:
    """Evaluate vector-field components over ``X`` with shape ``(m, 2n)``."""
    return np.stack([evaluate_batch(c, X) for c in field], axis=-1)


def measurement_kernel(o_tilde: float, o_tilde_src: float, t: float, kappa_units: float = 1.0) -> float:
    """Free-measurement propagator along the conjugate variable.

    Solution kernel of ``df/dt = kappa * d^2 f / dO~^2``: a Gaussian in
    ``o_tilde - o_tilde_src`` with variance ``2 * kappa * t``, normalized to
    unit mass.
    """
    if not t > 0:
        raise ValueError(f"t must be positive, got {t!r}")
    if not kappa_units > 0:
        raise ValueError(f"kappa_units must be positive, got {kappa_units!r}")
    s = kappa_units * t
    return math.exp(-((o_tilde - o_tilde_src) ** 2) / (4.0 * s)) / math.sqrt(4.0 * math.pi * s)


def conjugate_variable(observable: ObservableExpr) -> ObservableExpr:
    """Linear conjugate ``O~`` with ``{O, O~} = +1`` for a linear one-DOF observable.

    For ``O = a q + b p`` this is ``O~ = (a p - b q) / (a^2 + b^2)``; in
    particular ``p -> -q`` and ``q -> p``.
    """
    if observable.n_dof != 1:
        raise ValueError("conjugate_variable supports one degree of freedom only")
    zero = np.zeros(2)
    a = evaluate(differentiate(observable, "q1"), zero)
    b = evaluate(differentiate(observable, "p1"), zero)
    for var in ("q1", "p1"):
        d = differentiate(observable, var)
        for probe in (np.array([1.3, -0.7]), np.array([-2.1, 0.4])):
            if evaluate(d, probe) != evaluate(d, zero):
                raise ValueError(f"observable '{observable}' is not linear")
    norm = a * a + b * b
    if norm == 0:
        raise ValueError("constant observable has no conjugate")
    q, p = Var("q", 1), Var("p", 1)
    root = _add(_mul(Const(a / norm), p), _mul(Const(-b / norm), q))
    return ObservableExpr(root, 1)

