"""Ensemble Langevin simulation for drift plus measurement back-action.

The Stratonovich SDE

    dx = K(x) dt + sqrt(2 kappa) w(x) o dW

with ``w`` the Hamiltonian vector field of the measured observable has the
Fokker-Planck operator ``-div(K f) + kappa {O, {O, f}}``.  One Wiener channel
is used per measured observable.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import rng
from .dsl import Const, ObservableExpr, differentiate, evaluate_batch
from .phase import MeasurementSpec, field_batch, noise_field

__all__ = [
    "SdeSystem", "PointMass", "Gaussian", "EnsembleConfig", "MomentReport",
    "SimulationBlowUp", "FitQualityWarning", "RelaxationFit",
    "heun_stratonovich_step", "trapezoidal_stratonovich_step", "euler_maruyama_ito_step",
    "simulate_ensemble", "estimate_relaxation_rate", "coordinate_labels",
]

CHUNK_SIZE = 4096
NOISE_BLOCK = 256


class SimulationBlowUp(FloatingPointError):
    """A trajectory reached a non-finite state."""

    def __init__(self, time: float, trajectory: int):
        super().__init__(f"non-finite state in trajectory {trajectory} at t={time:g}")
        self.time = time
        self.trajectory = trajectory


class FitQualityWarning(UserWarning):
    pass


def coordinate_labels(dim: int) -> list[str]:
    return [f"{k}{i}" for i in range(1, dim // 2 + 1) for k in ("q", "p")]


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------

def _affine_parts(components: Sequence[ObservableExpr]) -> tuple[np.ndarray, np.ndarray] | None:
    """``(M, c)`` with ``components(x) == M x + c`` if every component is affine, else None."""
    dim = components[0].dim
    rows = []
    for comp in components:
        row = []
        for k in range(dim):
            d = differentiate(comp, k).root
            if not isinstance(d, Const):
                return None
            row.append(d.value)
        rows.append(row)
    offset = np.array([evaluate_batch(c, np.zeros((1, dim)))[0] for c in components])
    return np.array(rows), offset


@dataclass(frozen=True)
class SdeSystem:
    """Drift field plus an optional measurement, on a ``dim``-dimensional phase space.

    ``drift`` maps an array of shape ``(m, dim)`` to the same shape.  Use the
    constructors :meth:`linear`, :meth:`hamiltonian` or :meth:`from_fields`
    rather than building one by hand.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    measurement: MeasurementSpec | None = None
    drift_matrix: np.ndarray | None = None
    noise_affine: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ValueError(f"dimension must be even and positive, got {self.dim}")
        if self.measurement is not None:
            if self.measurement.dim != self.dim:
                raise ValueError(
                    f"measured observable lives in dimension {self.measurement.dim}, system in {self.dim}")
            if self.noise_affine is None:
                object.__setattr__(self, "noise_affine", _affine_parts(self.measurement.field))

    @property
    def kappa(self) -> float:
        return 0.0 if self.measurement is None else self.measurement.kappa

    @property
    def noise_scale(self) -> float:
        return math.sqrt(2.0 * self.kappa)

    @property
    def constant_noise(self) -> np.ndarray | None:
        """The noise vector if it does not depend on the state, else None."""
        if self.noise_affine is None or np.any(self.noise_affine[0]):
            return None
        return self.noise_affine[1]

    def noise(self, X: np.ndarray) -> np.ndarray:
        if self.measurement is None:
            return np.zeros_like(X)
        if self.noise_affine is not None:
            W, c = self.noise_affine
            if not np.any(W):
                return np.broadcast_to(c, X.shape)
            out = X @ W.T
            return out + c if np.any(c) else out
        return field_batch(self.measurement.field, X)

    def ito_correction(self, X: np.ndarray) -> np.ndarray:
        if self.measurement is None:
            return np.zeros_like(X)
        return self.kappa * field_batch(self.measurement.drift_correction_field, X)

    @classmethod
    def linear(cls, A, measurement: MeasurementSpec | None = None) -> "SdeSystem":
        A = np.array(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"drift matrix must be square, got shape {A.shape}")
        return cls(A.shape[0], lambda X: X @ A.T, measurement, drift_matrix=A)

    @classmethod
    def hamiltonian(cls, H: ObservableExpr, measurement: MeasurementSpec | None = None) -> "SdeSystem":
        """Drift ``(dH/dp_i, -dH/dq_i)``: Hamilton's equations for ``H``."""
        return cls.from_fields(noise_field(H), measurement)

    @classmethod
    def from_fields(cls, components: Sequence[ObservableExpr],
                    measurement: MeasurementSpec | None = None) -> "SdeSystem":
        components = tuple(components)
        dim = components[0].dim
        if len(components) != dim:
            raise ValueError(f"need {dim} drift components, got {len(components)}")
        parts = _affine_parts(components)
        if parts is not None and not np.any(parts[1]):
            A = parts[0]
            return cls(dim, lambda X: X @ A.T, measurement, drift_matrix=A)
        return cls(dim, lambda X: field_batch(components, X), measurement)


# ---------------------------------------------------------------------------
# Steppers
# ---------------------------------------------------------------------------

def _as_batch(x, dW):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    dW = np.asarray(dW, dtype=float).reshape(-1, 1) if np.ndim(dW) else np.full((X.shape[0], 1), float(dW))
    return X, dW, single


def heun_stratonovich_step(system: SdeSystem, x, dt: float, dW) -> np.ndarray:
    """One Heun predictor-corrector step of the Stratonovich SDE.

    ``x`` is a single point or an ``(m, dim)`` batch; ``dW`` holds the
    ``Normal(0, dt)`` increments (one per point).  With constant ``w`` the
    noise part is exact Euler-Maruyama.
    """
    X, dW, single = _as_batch(x, dW)
    s = system.noise_scale
    k0 = system.drift(X)
    if s == 0.0:
        pred = X + dt * k0
        out = X + 0.5 * dt * (k0 + system.drift(pred))
    elif (w := system.constant_noise) is not None:
        kick = (s * dW) * w
        pred = X + dt * k0 + kick
        out = X + 0.5 * dt * (k0 + system.drift(pred)) + kick
    else:
        w0 = system.noise(X)
        sdW = s * dW
        pred = X + dt * k0 + sdW * w0
        out = X + 0.5 * dt * (k0 + system.drift(pred)) + 0.5 * sdW * (w0 + system.noise(pred))
    return out[0] if single else out


def trapezoidal_stratonovich_step(system: SdeSystem, x, dt: float, dW,
                                  max_iter: int = 60) -> np.ndarray:
    """Heun step with the corrector iterated to its fixed point (implicit trapezoid).

    For linear drift and noise fields this is the Cayley transform of the
    step generator, which preserves every quadratic invariant shared by the
    two fields exactly.  Iteration stops when the update no longer changes
    the state beyond rounding or after ``max_iter`` sweeps.
    """
    X, dW, single = _as_batch(x, dW)
    s = system.noise_scale
    k0 = system.drift(X)
    w0 = system.noise(X) if s else 0.0
    sdW = s * dW
    base = X + 0.5 * dt * k0 + 0.5 * sdW * w0
    cur = heun_stratonovich_step(system, X, dt, dW)
    for _ in range(max_iter):
        nxt = base + 0.5 * dt * system.drift(cur)
        if s:
            nxt = nxt + 0.5 * sdW * system.noise(cur)
        done = np.max(np.abs(nxt - cur)) <= 1e-15 * (1.0 + np.max(np.abs(cur)))
        cur = nxt
        if done:
            break
    return cur[0] if single else cur


def euler_maruyama_ito_step(system: SdeSystem, x, dt: float, dW) -> np.ndarray:
    """Euler-Maruyama for the equivalent Itô SDE, drift ``K + B`` (cross-check scheme)."""
    X, dW, single = _as_batch(x, dW)
    out = X + dt * (system.drift(X) + system.ito_correction(X)) + system.noise_scale * dW * system.noise(X)
    return out[0] if single else out


_SCHEMES = {
    "heun": heun_stratonovich_step,
    "trapezoidal": trapezoidal_stratonovich_step,
    "ito-euler": euler_maruyama_ito_step,
}


# ---------------------------------------------------------------------------
# Initial conditions and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointMass:
    x0: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    @property
    def dim(self) -> int:
        return len(self.x0)

    def sample(self, gens: list[np.random.Generator]) -> np.ndarray:
        return np.tile(np.array(self.x0), (len(gens), 1))


@dataclass(frozen=True)
class Gaussian:
    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        mean = tuple(float(v) for v in self.mean)
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (len(mean), len(mean)):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {len(mean)}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * (1 + np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12 * (1 + np.abs(cov).max()):
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", tuple(tuple(r) for r in cov.tolist()))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def _factor(self) -> np.ndarray:
        vals, vecs = np.linalg.eigh(np.array(self.cov))
        return vecs * np.sqrt(np.clip(vals, 0.0, None))

    def sample(self, gens: list[np.random.Generator]) -> np.ndarray:
        z = rng.normal_block(gens, self.dim)
        return np.array(self.mean) + z @ self._factor().T


@dataclass(frozen=True)
class EnsembleConfig:
    n_traj: int
    dt: float
    t_final: float
    seed: int
    record_times: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "record_times", tuple(float(t) for t in self.record_times))
        if not isinstance(self.n_traj, (int, np.integer)) or self.n_traj < 1:
            raise ValueError(f"n_traj must be a positive integer, got {self.n_traj!r}")
        if not (self.dt > 0 and self.t_final > 0):
            raise ValueError("dt and t_final must be positive")
        if self.dt > self.t_final:
            raise ValueError(f"dt={self.dt} exceeds t_final={self.t_final}")
        rt = self.record_times
        if not rt:
            raise ValueError("record_times must not be empty")
        if any(b <= a for a, b in zip(rt, rt[1:])):
            raise ValueError("record_times must be strictly increasing")
        if rt[0] < 0 or rt[-1] > self.t_final * (1 + 1e-12):
            raise ValueError("record_times must lie in [0, t_final]")
        self.record_steps()

    def record_steps(self) -> list[int]:
        steps = []
        for t in self.record_times:
            n = round(t / self.dt)
            if abs(n * self.dt - t) > 1e-9 * max(1.0, t):
                raise ValueError(f"record time {t} is not a multiple of dt={self.dt}")
            steps.append(n)
        return steps

    @classmethod
    def uniform(cls, n_traj: int, dt: float, t_final: float, seed: int, n_records: int) -> "EnsembleConfig":
        """Record at ``n_records + 1`` equally spaced times from 0 to ``t_final``."""
        n_steps = round(t_final / dt)
        idx = np.linspace(0, n_steps, n_records + 1).round().astype(int)
        return cls(n_traj, dt, t_final, seed, tuple(float(i * dt) for i in np.unique(idx)))


# ---------------------------------------------------------------------------
# Moment report
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class MomentReport:
    """Ensemble moments at each record time.

    Arrays are indexed by record time first.  ``second`` holds raw moments
    about zero; ``cov`` central moments; the ``*_se`` arrays standard errors
    of the corresponding ensemble means.  ``extra`` maps the name of each
    user observable to ``(mean, se)`` arrays.
    """

    times: np.ndarray
    mean: np.ndarray
    mean_se: np.ndarray
    second: np.ndarray
    second_se: np.ndarray
    cov: np.ndarray
    cov_se: np.ndarray
    n_traj: int
    labels: list[str]
    extra: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    final_samples: np.ndarray | None = None

    @classmethod
    def from_states(cls, times, states: np.ndarray, labels=None,
                    observables: Mapping[str, Callable[[np.ndarray], np.ndarray]] | None = None,
                    keep_final: bool = False) -> "MomentReport":
        """Reduce ``states`` of shape ``(n_times, n_traj, dim)`` into moments."""
        n_times, n, dim = states.shape
        root_n = math.sqrt(n)
        mean = states.mean(axis=1)
        mean_se = states.std(axis=1, ddof=1) / root_n if n > 1 else np.zeros_like(mean)
        prod = states[:, :, :, None] * states[:, :, None, :]
        second = prod.mean(axis=1)
        centered = states - mean[:, None, :]
        cprod = centered[:, :, :, None] * centered[:, :, None, :]
        cov = cprod.sum(axis=1) / max(n - 1, 1)
        if n > 1:
            second_se = prod.std(axis=1, ddof=1) / root_n
            cov_se = cprod.std(axis=1, ddof=1) / root_n
        else:
            second_se = np.zeros_like(second)
            cov_se = np.zeros_like(cov)
        extra = {}
        for name, fn in (observables or {}).items():
            vals = np.stack([np.asarray(fn(states[r]), dtype=float) for r in range(n_times)])
            se = vals.std(axis=1, ddof=1) / root_n if n > 1 else np.zeros(n_times)
            extra[name] = (vals.mean(axis=1), se)
        return cls(
            times=np.asarray(times, dtype=float), mean=mean, mean_se=mean_se,
            second=second, second_se=second_se, cov=cov, cov_se=cov_se,
            n_traj=n, labels=list(labels or coordinate_labels(dim)), extra=extra,
            final_samples=states[-1].copy() if keep_final else None,
        )

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def at(self, t: float) -> int:
        """Index of record time ``t``."""
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no record at t={t}")
        return idx

    def columns(self) -> list[str]:
        lab, d = self.labels, self.dim
        pairs = [(i, j) for i in range(d) for j in range(i, d)]
        cols = ["t"]
        cols += [f"mean_{lab[i]}" for i in range(d)]
        cols += [f"cov_{lab[i]}_{lab[j]}" for i, j in pairs]
        cols += [f"stderr_mean_{lab[i]}" for i in range(d)]
        cols += [f"stderr_cov_{lab[i]}_{lab[j]}" for i, j in pairs]
        cols += [f"m2_{lab[i]}_{lab[j]}" for i, j in pairs]
        cols += [f"stderr_m2_{lab[i]}_{lab[j]}" for i, j in pairs]
        for name in self.extra:
            cols += [name, f"stderr_{name}"]
        return cols

    def rows(self) -> list[list[float]]:
        d = self.dim
        pairs = [(i, j) for i in range(d) for j in range(i, d)]
        out = []
        for r, t in enumerate(self.times):
            row = [t]
            row += list(self.mean[r])
            row += [self.cov[r, i, j] for i, j in pairs]
            row += list(self.mean_se[r])
            row += [self.cov_se[r, i, j] for i, j in pairs]
            row += [self.second[r, i, j] for i, j in pairs]
            row += [self.second_se[r, i, j] for i, j in pairs]
            for mean, se in self.extra.values():
                row += [mean[r], se[r]]
            out.append(row)
        return out

    def to_csv(self) -> str:
        lines = [",".join(self.columns())]
        lines += [",".join(_fmt(v) for v in row) for row in self.rows()]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "n_traj": self.n_traj,
            "labels": self.labels,
            "times": self.times.tolist(),
            "mean": self.mean.tolist(),
            "mean_se": self.mean_se.tolist(),
            "second": self.second.tolist(),
            "second_se": self.second_se.tolist(),
            "cov": self.cov.tolist(),
            "cov_se": self.cov_se.tolist(),
            "extra": {k: {"mean": m.tolist(), "se": s.tolist()} for k, (m, s) in self.extra.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "MomentReport":
        arr = {k: np.array(doc[k], dtype=float)
               for k in ("times", "mean", "mean_se", "second", "second_se", "cov", "cov_se")}
        extra = {k: (np.array(v["mean"]), np.array(v["se"])) for k, v in doc.get("extra", {}).items()}
        return cls(n_traj=int(doc["n_traj"]), labels=list(doc["labels"]), extra=extra, **arr)


# ---------------------------------------------------------------------------
# Ensemble driver
# ---------------------------------------------------------------------------

def _run_chunk(system: SdeSystem, init, config: EnsembleConfig, start: int, stop: int,
               record_steps: list[int], step_fn) -> np.ndarray:
    noise_gens = rng.streams(config.seed, start, stop, rng.NOISE)
    X = np.asarray(init.sample(rng.streams(config.seed, start, stop, rng.INITIAL)), dtype=float)
    out = np.empty((len(record_steps), stop - start, system.dim))
    sqdt = math.sqrt(config.dt)
    has_noise = system.noise_scale > 0
    r = 0
    while r < len(record_steps) and record_steps[r] == 0:
        out[r] = X
        r += 1
    # non-finite states are detected explicitly below
    with np.errstate(over="ignore", invalid="ignore"):
        _advance(system, config, X, out, r, record_steps, step_fn, noise_gens, sqdt, has_noise, start)
    return out


def _advance(system, config, X, out, r, record_steps, step_fn, noise_gens, sqdt, has_noise, start):
    n_total = record_steps[-1]
    block = None
    for n in range(1, n_total + 1):
        if has_noise:
            j = (n - 1) % NOISE_BLOCK
            if j == 0:
                block = rng.normal_block(noise_gens, min(NOISE_BLOCK, n_total - n + 1)) * sqdt
            dW = block[:, j]
        else:
            dW = 0.0
        X = step_fn(system, X, config.dt, dW)
        if not math.isfinite(X.sum()):
            bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
            raise SimulationBlowUp(n * config.dt, start + bad)
        while r < len(record_steps) and record_steps[r] == n:
            out[r] = X
            r += 1


def simulate_ensemble(system: SdeSystem, init: PointMass | Gaussian, config: EnsembleConfig, *,
                      scheme: str = "heun",
                      observables: Mapping[str, Callable[[np.ndarray], np.ndarray]] | None = None,
                      keep_final: bool = False, n_workers: int = 1) -> MomentReport:
    """Simulate ``config.n_traj`` independent trajectories and reduce to moments.

    Trajectory ``i`` draws its noise from the stream keyed by
    ``(config.seed, i)``.  Trajectories are processed in fixed-size chunks,
    optionally on ``n_workers`` threads, and reduced in trajectory order, so
    the report is bit-identical for any worker count.

    ``scheme`` is one of ``"heun"`` (default), ``"trapezoidal"`` (corrector
    iterated to convergence) or ``"ito-euler"``.

    Raises
    ------
    SimulationBlowUp
        When any trajectory reaches a non-finite state.
    """
    if init.dim != system.dim:
        raise ValueError(f"initial condition has dimension {init.dim}, system {system.dim}")
    try:
        step_fn = _SCHEMES[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(_SCHEMES)}") from None
    steps = config.record_steps()
    bounds = [(s, min(s + CHUNK_SIZE, config.n_traj)) for s in range(0, config.n_traj, CHUNK_SIZE)]

    def work(b):
        return _run_chunk(system, init, config, b[0], b[1], steps, step_fn)

    if n_workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    states = np.concatenate(parts, axis=1)
    return MomentReport.from_states(config.record_times, states, observables=observables,
                                    keep_final=keep_final)


# ---------------------------------------------------------------------------
# Relaxation-rate fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelaxationFit:
    rate: float
    intercept: float
    r_squared: float
    flagged: bool


def estimate_relaxation_rate(times, values, limit: float = 0.0, min_r_squared: float = 0.9) -> RelaxationFit:
    """Least-squares decay rate of ``|values - limit|``, fitted on a log scale.

    Returns the rate ``lambda`` in ``|values - limit| ~ exp(intercept - lambda t)``
    with the coefficient of determination.  Emits :class:`FitQualityWarning`
    and sets ``flagged`` when ``R^2 < min_r_squared`` or is undefined.
    """
    t = np.asarray(times, dtype=float)
    y = np.abs(np.asarray(values, dtype=float) - limit)
    if t.shape != y.shape or t.size < 2:
        raise ValueError("need at least two matching samples")
    if np.any(y <= 0):
        raise ValueError("series must differ from its limit at every sample")
    logy = np.log(y)
    slope, intercept = np.polyfit(t, logy, 1)
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    resid = logy - (slope * t + intercept)
    ss_res = float(np.sum(resid ** 2))
    if ss_tot <= 1e-24 * max(1.0, float(np.sum(logy ** 2))):
        r2 = math.nan
        slope = 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    flagged = not (r2 >= min_r_squared)
    if flagged:
        warnings.warn(f"poor exponential fit (R^2={r2:.3g})", FitQualityWarning, stacklevel=2)
    return RelaxationFit(rate=float(-slope), intercept=float(intercept), r_squared=r2, flagged=flagged)
