"""Auto-oscillator near a Hopf bifurcation with its phase continuously measured.

Normal form ``dz/dt = z (i omega + epsilon - c |z|^2)``.  In action-angle
variables ``j = |z|^2 / 2``, ``phi = -arg z`` the phase measurement diffuses
the action only:

    dj = (2 epsilon j - 4 c j^2) dt + sqrt(2 D) dW,    dphi = omega dt,

with a reflecting wall at ``j = 0``.  The stationary action density is
``F(j) ~ exp(epsilon j^2 / D - 4 c j^3 / (3 D))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate

from . import rng
from .engine import SimulationBlowUp

__all__ = [
    "HopfParams", "HopfSamples", "cartesian_drift", "action_angle", "action_drift",
    "action_sde_step", "stationary_action_density", "extremum_ratio", "simulate_action",
    "action_histogram", "histogram_l1", "histogram_csv",
]


@dataclass(frozen=True)
class HopfParams:
    omega: float
    epsilon: float
    c: float
    Dj: float

    def __post_init__(self):
        for name in ("omega", "epsilon", "c", "Dj"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.c > 0:
            raise ValueError(f"saturation c must be positive, got {self.c:g}")
        if not self.Dj > 0:
            raise ValueError(f"action diffusion Dj must be positive, got {self.Dj:g}")

    @property
    def limit_cycle_action(self) -> float:
        return self.epsilon / (2.0 * self.c)

    def require_supercritical(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"stationary analysis needs epsilon > 0, got {self.epsilon:g}")

    def log_density(self, j):
        """Unnormalized log of the stationary action density."""
        j = np.asarray(j, dtype=float)
        return (self.epsilon * j ** 2 - 4.0 * self.c * j ** 3 / 3.0) / self.Dj

    @cached_property
    def _log_peak(self) -> float:
        return float(self.log_density(self.limit_cycle_action))

    @cached_property
    def _norm(self) -> float:
        # integral of exp(log_density - log_peak) over [0, inf)
        self.require_supercritical()
        f = lambda j: math.exp(float(self.log_density(j)) - self._log_peak)
        upper = self.support_upper(60.0)
        val, _ = integrate.quad(f, 0.0, upper, epsabs=0.0, epsrel=1e-10, limit=200,
                                points=[self.limit_cycle_action])
        return val

    def support_upper(self, depth: float = 40.0) -> float:
        """Smallest ``j`` beyond the peak where the density has fallen by ``exp(-depth)``."""
        j0 = self.limit_cycle_action
        step = max(j0, math.sqrt(self.Dj / self.c) ** (2.0 / 3.0), 1e-3)
        hi = j0 + step
        while float(self.log_density(hi)) - self._log_peak > -depth:
            hi += step
        lo = j0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if float(self.log_density(mid)) - self._log_peak > -depth:
                lo = mid
            else:
                hi = mid
        return hi


def cartesian_drift(params: HopfParams, x: float, y: float) -> tuple[float, float]:
    """Real and imaginary parts of ``z (i omega + epsilon - c |z|^2)`` at ``z = x + i y``."""
    z = complex(x, y)
    dz = z * complex(params.epsilon - params.c * abs(z) ** 2, params.omega)
    return dz.real, dz.imag


def action_angle(x: float, y: float) -> tuple[float, float | None]:
    """``(j, phi)`` with ``j = (x^2 + y^2)/2`` and ``phi = -atan2(y, x)`` in ``(-pi, pi]``.

    ``phi`` is None at the origin.
    """
    j = 0.5 * (x * x + y * y)
    if x == 0.0 and y == 0.0:
        return j, None
    phi = -math.atan2(y, x)
    if phi <= -math.pi:
        phi += 2.0 * math.pi
    return j, phi


def action_drift(params: HopfParams, j):
    return 2.0 * params.epsilon * j - 4.0 * params.c * j * j


def action_sde_step(params: HopfParams, j, dt: float, dW):
    """Euler-Maruyama step for the action with a reflecting wall at zero."""
    out = j + action_drift(params, j) * dt + math.sqrt(2.0 * params.Dj) * dW
    return np.abs(out) if isinstance(out, np.ndarray) else abs(out)


def stationary_action_density(params: HopfParams, j):
    """Normalized stationary density of the action on ``[0, inf)``."""
    params.require_supercritical()
    j = np.asarray(j, dtype=float)
    if np.any(j < 0):
        raise ValueError("action must be non-negative")
    out = np.exp(params.log_density(j) - params._log_peak) / params._norm
    return float(out) if out.ndim == 0 else out


def extremum_ratio(params: HopfParams) -> float:
    """Density at the limit cycle over density at the origin: ``exp(eps^3 / (12 D c^2))``."""
    params.require_supercritical()
    return math.exp(params.epsilon ** 3 / (12.0 * params.Dj * params.c ** 2))


@dataclass
class HopfSamples:
    j: np.ndarray
    phi: np.ndarray
    times: np.ndarray
    n_traj: int


def simulate_action(params: HopfParams, n_traj: int, dt: float, t_final: float, seed: int,
                    sample_every: float, burn_in: float | None = None,
                    j0: float | None = None, phi0: float = 0.0) -> HopfSamples:
    """Ensemble of reduced-model trajectories sampled after burn-in.

    Every trajectory starts at ``(j0, phi0)`` (default: on the limit cycle)
    and is sampled at ``burn_in + k * sample_every`` up to ``t_final``;
    ``burn_in`` defaults to ``10 / epsilon``.  Trajectory ``i`` uses the
    noise stream keyed by ``(seed, i)``.
    """
    if burn_in is None:
        params.require_supercritical()
        burn_in = 10.0 / params.epsilon
    if not (dt > 0 and t_final > burn_in and sample_every >= dt):
        raise ValueError("need dt > 0, t_final > burn_in and sample_every >= dt")
    n_steps = round(t_final / dt)
    first = math.ceil(burn_in / dt - 1e-9)
    stride = round(sample_every / dt)
    sample_steps = np.arange(first, n_steps + 1, stride)
    j = np.full(n_traj, params.limit_cycle_action if j0 is None else float(j0))
    gens = rng.streams(seed, 0, n_traj, rng.NOISE)
    sqdt = math.sqrt(dt)
    out = np.empty((len(sample_steps), n_traj))
    k = 0
    block_len = 1024
    block = None
    for n in range(1, n_steps + 1):
        col = (n - 1) % block_len
        if col == 0:
            block = rng.normal_block(gens, min(block_len, n_steps - n + 1)) * sqdt
        j = action_sde_step(params, j, dt, block[:, col])
        if k < len(sample_steps) and sample_steps[k] == n:
            if not np.all(np.isfinite(j)):
                raise SimulationBlowUp(n * dt, int(np.flatnonzero(~np.isfinite(j))[0]))
            out[k] = j
            k += 1
    times = sample_steps * dt
    phi = np.mod(phi0 + params.omega * times + math.pi, 2 * math.pi) - math.pi
    phi = np.where(phi <= -math.pi, phi + 2 * math.pi, phi)
    return HopfSamples(j=out.ravel(), phi=np.repeat(phi, n_traj), times=times, n_traj=n_traj)


def action_histogram(params: HopfParams, samples, bins: int = 30):
    """Bin edges, counts, model bin probabilities and the tail mass beyond the last edge."""
    samples = np.asarray(samples, dtype=float)
    upper = params.support_upper(25.0)
    edges = np.linspace(0.0, upper, bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    probs = np.empty(bins)
    for i in range(bins):
        probs[i], _ = integrate.quad(lambda j: stationary_action_density(params, j),
                                     edges[i], edges[i + 1], epsabs=0.0, epsrel=1e-10)
    overflow = int(np.sum(samples > upper))
    tail = max(0.0, 1.0 - probs.sum())
    return edges, counts, probs, overflow, tail


def histogram_l1(params: HopfParams, samples, bins: int = 30) -> float:
    """L1 distance between the empirical and model action distributions.

    ``sum_i |n_i / N - P_i|`` over bins plus the tail bin; equals
    ``integral |f_hat - F| dj`` for the binned densities.
    """
    edges, counts, probs, overflow, tail = action_histogram(params, samples, bins)
    n = counts.sum() + overflow
    return float(np.abs(counts / n - probs).sum() + abs(overflow / n - tail))


def histogram_csv(params: HopfParams, samples, bins: int = 30) -> str:
    edges, counts, probs, _, _ = action_histogram(params, samples, bins)
    widths = np.diff(edges)
    lines = ["bin_left,bin_right,count,model_density"]
    for i in range(bins):
        row = (float(edges[i]), float(edges[i + 1]), int(counts[i]), float(probs[i] / widths[i]))
        lines.append("{!r},{!r},{},{!r}".format(*row))
    return "\n".join(lines) + "\n"
