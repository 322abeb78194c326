"""Scenario configuration, validation and execution.

A scenario is a single strict JSON document, for example::

    {
      "scenario": "linear",
      "observable": "p1",
      "kappa": 1.0,
      "drift": {"matrix": [[0, 1], [-1, -1]]},
      "initial": {"type": "point", "x0": [0, 0]},
      "ensemble": {"n_traj": 2000, "dt": 0.01, "t_final": 20, "seed": 1, "n_records": 20}
    }

Every key is documented in ``README.md``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import composite as comp
from . import hopf, linear
from .dsl import Const, ObservableExpr, ParseError, evaluate_batch, parse_observable
from .engine import (
    EnsembleConfig, Gaussian, MomentReport, PointMass, SdeSystem,
    estimate_relaxation_rate, simulate_ensemble,
)
from .phase import MeasurementSpec, conjugate_variable, diffusion_tensor

SCENARIOS = ("linear", "composite", "hopf", "free-measurement")


class ConfigError(ValueError):
    """Invalid configuration; ``diagnostics`` lists ``(key path, message)`` pairs."""

    def __init__(self, diagnostics: list[tuple[str, str]]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{p}: {m}" for p, m in diagnostics))


# ---------------------------------------------------------------------------
# Strict JSON loading and overrides
# ---------------------------------------------------------------------------

def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError([(k, "duplicate key")])
        out[k] = v
    return out


def _reject_constant(name):
    raise ConfigError([("", f"non-standard JSON constant {name}")])


def loads_config(text: str) -> dict:
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicates, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")]) from None
    if not isinstance(doc, dict):
        raise ConfigError([("", "top level must be a JSON object")])
    return doc


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read())


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Return a copy of ``doc`` with each ``dotted.key=value`` applied.

    Values are parsed as JSON when possible and kept as strings otherwise.
    The key must already exist.
    """
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([(item, "override must look like key=value")])
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = doc
        for i, key in enumerate(keys):
            where = ".".join(keys[: i + 1])
            if isinstance(node, list):
                if not key.isdigit() or int(key) >= len(node):
                    raise ConfigError([(where, "no such list index")])
                key = int(key)
            elif not isinstance(node, dict) or key not in node:
                raise ConfigError([(where, "override refers to a key missing from the config")])
            if i == len(keys) - 1:
                try:
                    value = json.loads(raw, parse_constant=_reject_constant)
                except json.JSONDecodeError:
                    value = raw
                node[key] = value
            else:
                node = node[key]
    return doc


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

class _Checker:
    def __init__(self):
        self.diags: list[tuple[str, str]] = []

    def add(self, path: str, msg: str):
        self.diags.append((path, msg))

    def keys(self, node: dict, path: str, required: set, optional: set) -> bool:
        if not isinstance(node, dict):
            self.add(path, "must be an object")
            return False
        for k in sorted(set(node) - required - optional):
            self.add(f"{path}.{k}" if path else k, "unknown key")
        for k in sorted(required - set(node)):
            self.add(f"{path}.{k}" if path else k, "missing required key")
        return True

    def number(self, node: dict, key: str, path: str, *, positive=False, nonneg=False,
               default=None) -> float | None:
        where = f"{path}.{key}" if path else key
        if key not in node:
            return default
        v = node[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.add(where, "must be a finite number")
            return None
        if positive and not v > 0:
            self.add(where, "must be positive")
            return None
        if nonneg and v < 0:
            self.add(where, "must be non-negative")
            return None
        return float(v)

    def integer(self, node: dict, key: str, path: str, *, minimum=None) -> int | None:
        where = f"{path}.{key}" if path else key
        v = node.get(key)
        if isinstance(v, bool) or not isinstance(v, int):
            self.add(where, "must be an integer")
            return None
        if minimum is not None and v < minimum:
            self.add(where, f"must be >= {minimum}")
            return None
        return v

    def vector(self, v, where: str, dim: int) -> list[float] | None:
        if (not isinstance(v, list) or len(v) != dim
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v)):
            self.add(where, f"must be a list of {dim} finite numbers")
            return None
        return [float(x) for x in v]

    def matrix(self, v, where: str, dim: int) -> np.ndarray | None:
        if not isinstance(v, list) or len(v) != dim:
            self.add(where, f"must be a {dim}x{dim} matrix")
            return None
        rows = [self.vector(r, f"{where}.{i}", dim) for i, r in enumerate(v)]
        if any(r is None for r in rows):
            return None
        return np.array(rows)


# ---------------------------------------------------------------------------
# Parsed scenario
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    kind: str
    doc: dict
    n_dof: int
    measurement: MeasurementSpec | None = None
    system: SdeSystem | None = None
    init: PointMass | Gaussian | None = None
    ensemble: EnsembleConfig | None = None
    scheme: str = "heun"
    pair: comp.OscillatorPair | None = None
    hopf: hopf.HopfParams | None = None
    hopf_run: dict | None = None
    bins: int = 30
    lin: linear.LinearSystem2 | None = None
    diff2: linear.DiffusionMatrix2 | None = None


def _check_ensemble(ck: _Checker, node, *, hopf_mode=False) -> Any:
    path = "ensemble"
    if hopf_mode:
        req = {"n_traj", "dt", "t_final", "seed", "sample_every"}
        opt = {"burn_in"}
    else:
        req = {"n_traj", "dt", "t_final", "seed"}
        opt = {"record_times", "n_records"}
    if not ck.keys(node, path, req, opt):
        return None
    n_traj = ck.integer(node, "n_traj", path, minimum=1)
    dt = ck.number(node, "dt", path, positive=True)
    t_final = ck.number(node, "t_final", path, positive=True)
    seed = ck.integer(node, "seed", path)
    if seed is not None and not -(2 ** 63) <= seed < 2 ** 64:
        ck.add(f"{path}.seed", "must fit in 64 bits")
        seed = None
    if hopf_mode:
        every = ck.number(node, "sample_every", path, positive=True)
        burn = ck.number(node, "burn_in", path, nonneg=True)
        if None in (n_traj, dt, t_final, seed, every):
            return None
        return {"n_traj": n_traj, "dt": dt, "t_final": t_final, "seed": seed,
                "sample_every": every, "burn_in": burn}
    if "record_times" in node and "n_records" in node:
        ck.add(path, "give either record_times or n_records, not both")
        return None
    if None in (n_traj, dt, t_final, seed):
        return None
    try:
        if "record_times" in node:
            rt = node["record_times"]
            if not isinstance(rt, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in rt):
                ck.add(f"{path}.record_times", "must be a list of numbers")
                return None
            return EnsembleConfig(n_traj, dt, t_final, seed, tuple(rt))
        n_rec = ck.integer(node, "n_records", path, minimum=1) if "n_records" in node else 20
        if n_rec is None:
            return None
        return EnsembleConfig.uniform(n_traj, dt, t_final, seed, n_rec)
    except ValueError as exc:
        ck.add(path, str(exc))
        return None


def _check_initial(ck: _Checker, node, dim: int):
    path = "initial"
    if not isinstance(node, dict) or node.get("type") not in ("point", "gaussian"):
        ck.add(f"{path}.type", "must be 'point' or 'gaussian'")
        return None
    if node["type"] == "point":
        if not ck.keys(node, path, {"type", "x0"}, set()):
            return None
        x0 = ck.vector(node.get("x0"), f"{path}.x0", dim)
        return None if x0 is None else PointMass(tuple(x0))
    if not ck.keys(node, path, {"type", "mean", "cov"}, set()):
        return None
    mean = ck.vector(node.get("mean"), f"{path}.mean", dim)
    cov = ck.matrix(node.get("cov"), f"{path}.cov", dim)
    if mean is None or cov is None:
        return None
    try:
        return Gaussian(tuple(mean), tuple(map(tuple, cov)))
    except ValueError as exc:
        ck.add(f"{path}.cov", str(exc))
        return None


def _check_observable(ck: _Checker, doc: dict, n_dof: int, kappa: float | None, default: str | None = None):
    text = doc.get("observable", default)
    if not isinstance(text, str):
        ck.add("observable", "must be a string")
        return None
    try:
        expr = parse_observable(text, n_dof)
    except ParseError as exc:
        ck.add("observable", str(exc))
        return None
    if kappa is None:
        return None
    return MeasurementSpec(expr, kappa)


def _check_outputs(ck: _Checker, doc: dict) -> int:
    node = doc.get("outputs", {})
    if not ck.keys(node, "outputs", set(), {"histogram_bins"}):
        return 30
    if "histogram_bins" in node:
        bins = ck.integer(node, "histogram_bins", "outputs", minimum=2)
        return bins or 30
    return 30


def parse_scenario(doc: dict) -> Scenario:
    """Validate ``doc`` fully and build the scenario; raises :class:`ConfigError`."""
    ck = _Checker()
    kind = doc.get("scenario")
    if kind not in SCENARIOS:
        raise ConfigError([("scenario", f"must be one of {', '.join(SCENARIOS)}")])
    allowed = {
        "linear": {"scenario", "kappa", "observable", "drift", "initial", "ensemble", "outputs", "scheme"},
        "composite": {"scenario", "kappa", "observable", "drift", "initial", "ensemble", "outputs", "scheme"},
        "hopf": {"scenario", "kappa", "observable", "drift", "ensemble", "outputs"},
        "free-measurement": {"scenario", "kappa", "observable", "n_dof", "initial", "ensemble", "outputs", "scheme"},
    }[kind]
    required = {"scenario", "kappa", "drift"} if kind != "free-measurement" else {"scenario", "kappa", "observable"}
    if kind == "linear":
        required = required | {"observable"}
    if kind == "composite":
        required = required | {"initial"}
    ck.keys(doc, "", required, allowed - required)
    kappa = ck.number(doc, "kappa", "", nonneg=True)
    sc = Scenario(kind=kind, doc=doc, n_dof=1)
    sc.bins = _check_outputs(ck, doc)
    scheme = doc.get("scheme", "trapezoidal" if kind == "composite" else "heun")
    if scheme not in ("heun", "trapezoidal", "ito-euler"):
        ck.add("scheme", "must be 'heun', 'trapezoidal' or 'ito-euler'")
    sc.scheme = scheme

    if kind == "linear":
        _parse_linear(ck, doc, sc, kappa)
    elif kind == "composite":
        _parse_composite(ck, doc, sc, kappa)
    elif kind == "hopf":
        _parse_hopf(ck, doc, sc, kappa)
    else:
        _parse_free(ck, doc, sc, kappa)
    if ck.diags:
        raise ConfigError(ck.diags)
    return sc


def _parse_linear(ck, doc, sc, kappa):
    sc.n_dof = 1
    sc.measurement = _check_observable(ck, doc, 1, kappa)
    drift = doc.get("drift")
    A = None
    if ck.keys(drift, "drift", {"matrix"}, set()):
        A = ck.matrix(drift.get("matrix"), "drift.matrix", 2)
    if A is not None:
        try:
            sc.lin = linear.LinearSystem2.from_matrix(A)
        except linear.NotHurwitzError as exc:
            ck.add("drift.matrix", f"Hurwitz restriction violated: {exc}")
    if sc.measurement is not None:
        w_parts = SdeSystem(2, lambda X: X, sc.measurement).constant_noise
        if w_parts is None:
            ck.add("observable", "linear scenario needs an observable linear in q1, p1 (constant diffusion)")
        else:
            sc.diff2 = linear.DiffusionMatrix2.from_noise_vector(w_parts, sc.measurement.kappa)
    if A is not None and sc.measurement is not None:
        sc.system = SdeSystem.linear(A, sc.measurement)
    sc.init = _check_initial(ck, doc["initial"], 2) if "initial" in doc else PointMass((0.0, 0.0))
    if "ensemble" in doc:
        sc.ensemble = _check_ensemble(ck, doc["ensemble"])


def _parse_composite(ck, doc, sc, kappa):
    sc.n_dof = 2
    sc.measurement = _check_observable(ck, doc, 2, kappa, default=comp.ANGULAR_MOMENTUM)
    if sc.measurement is not None:
        probe = np.array([[0.3, -1.1, 0.7, 0.2], [1.5, 0.4, -0.6, 2.0]])
        if not np.allclose(evaluate_batch(sc.measurement.observable, probe),
                           evaluate_batch(comp.angular_momentum(), probe), rtol=1e-12, atol=0):
            ck.add("observable", f"composite scenario measures the angular momentum '{comp.ANGULAR_MOMENTUM}'")
    drift = doc.get("drift")
    m = k = None
    if ck.keys(drift, "drift", {"hamiltonian"}, {"m", "k"}):
        if drift.get("hamiltonian") != "oscillator_pair":
            ck.add("drift.hamiltonian", "must be 'oscillator_pair'")
        m = ck.number(drift, "m", "drift", positive=True, default=1.0)
        k = ck.number(drift, "k", "drift", positive=True, default=1.0)
    if m is not None and k is not None and kappa is not None:
        sc.pair = comp.OscillatorPair(m, k, kappa)
    sc.init = _check_initial(ck, doc["initial"], 4)
    if sc.pair is not None and sc.init is not None:
        E, M = _initial_energy_momentum(sc.pair, sc.init)
        try:
            sc.pair.check_admissible(E, M)
        except comp.AdmissibilityError as exc:
            ck.add("initial", f"PSD bound violated by initial moments: {exc}")
    if sc.pair is not None and sc.measurement is not None:
        sc.system = SdeSystem.hamiltonian(comp.hamiltonian(sc.pair), sc.measurement)
    if "ensemble" in doc:
        sc.ensemble = _check_ensemble(ck, doc["ensemble"])


def _parse_hopf(ck, doc, sc, kappa):
    if "observable" in doc:
        _check_observable(ck, doc, 1, None)
    drift = doc.get("drift")
    if ck.keys(drift, "drift", {"omega", "epsilon", "c"}, set()):
        vals = [ck.number(drift, key, "drift") for key in ("omega", "epsilon", "c")]
        if kappa is not None and kappa <= 0:
            ck.add("kappa", "action diffusion must be positive")
        elif None not in vals and kappa is not None:
            try:
                sc.hopf = hopf.HopfParams(vals[0], vals[1], vals[2], kappa)
                sc.hopf.require_supercritical()
            except ValueError as exc:
                ck.add("drift", str(exc))
                sc.hopf = None
    if "ensemble" in doc:
        sc.hopf_run = _check_ensemble(ck, doc["ensemble"], hopf_mode=True)
        if sc.hopf_run and sc.hopf is not None:
            burn = sc.hopf_run["burn_in"]
            burn = 10.0 / sc.hopf.epsilon if burn is None else burn
            if sc.hopf_run["t_final"] <= burn:
                ck.add("ensemble.t_final", f"must exceed burn-in {burn:g}")


def _parse_free(ck, doc, sc, kappa):
    n = doc.get("n_dof", 1)
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        ck.add("n_dof", "must be a positive integer")
        n = 1
    sc.n_dof = n
    sc.measurement = _check_observable(ck, doc, n, kappa)
    if sc.measurement is not None:
        zero = [ObservableExpr(Const(0.0), n) for _ in range(2 * n)]
        sc.system = SdeSystem.from_fields(zero, sc.measurement)
    sc.init = _check_initial(ck, doc["initial"], 2 * n) if "initial" in doc else PointMass((0.0,) * (2 * n))
    if "ensemble" in doc:
        sc.ensemble = _check_ensemble(ck, doc["ensemble"])


def validate(doc: dict) -> list[tuple[str, str]]:
    """All diagnostics for ``doc``; empty when valid."""
    try:
        parse_scenario(doc)
    except ConfigError as exc:
        return exc.diagnostics
    return []


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _initial_second_moments(init) -> tuple[np.ndarray, np.ndarray]:
    mean = np.array(init.x0 if isinstance(init, PointMass) else init.mean)
    cov = np.zeros((mean.size, mean.size)) if isinstance(init, PointMass) else np.array(init.cov)
    return mean, cov + np.outer(mean, mean)


def _initial_energy_momentum(pair: comp.OscillatorPair, init) -> tuple[float, float]:
    _, S = _initial_second_moments(init)
    s0 = comp.SecondMoments4(S)
    E1, E2 = s0.energies(pair)
    return 0.5 * (E1 + E2), s0.angular_momentum


@dataclass
class RunResult:
    analysis: dict
    timeseries: str | None = None
    histogram: str | None = None


def _mat(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()


def _analysis_linear(sc: Scenario) -> dict:
    s, D = sc.lin, sc.diff2
    m = linear.closed_form_moments(s, D)
    X = linear.solve_lyapunov(s.matrix, D.matrix)
    L = linear.kinetic_matrix(s, D)
    r = linear.onsager_residual(s, D)
    out = {
        "drift_matrix": _mat(s.matrix),
        "diffusion_matrix": _mat(D.matrix),
        "trace": s.trace, "det": s.det,
        "m11": m.m11, "m12": m.m12, "m22": m.m22,
        "lyapunov_covariance": _mat(X),
        "entropy_matrix": None if m.entropy_matrix is None else _mat(m.entropy_matrix),
        "kinetic_matrix": _mat(L),
        "kinetic_symmetric_part_minus_D": _mat(0.5 * (L + L.T) - D.matrix),
        "eta": m.eta,
        "onsager_residual": r,
        "covariance_det": m.det,
        "covariance_det_predicted": linear.frozen_determinant(s, D),
    }
    if s.b == 0 and D.D1 == 0 and D.D == 0 and D.D2 > 0:
        z = linear.zeno_stationary(s.a, s.b, s.c, s.d, kappa=D.D2)
        out["zeno"] = {"frozen_value": z.frozen_value, "conjugate_variance": z.conjugate_variance,
                       "normalization": z.normalization}
    return out


def _analysis_composite(sc: Scenario) -> dict:
    pair = sc.pair
    E, M = _initial_energy_momentum(pair, sc.init)
    _, S0 = _initial_second_moments(sc.init)
    E1, E2 = comp.SecondMoments4(S0).energies(pair)
    stat = comp.stationary_moments(E, M, pair)
    binv, beta = comp.beta_matrices(E, M, pair)
    g = comp.gibbs_parameters(E, M, pair)
    return {
        "m": pair.m, "k": pair.k, "kappa": pair.kappa, "omega0": pair.omega0,
        "E1_initial": E1, "E2_initial": E2, "E": E, "M": M,
        "energy_relaxation_rate": 4.0 * pair.kappa,
        "stationary_moments": _mat(stat.matrix),
        "beta_inverse": _mat(binv),
        "beta": _mat(beta),
        "gibbs": {"beta": g.beta, "Omega": g.Omega, "KT_eff": g.KT_eff},
    }


def _analysis_hopf(sc: Scenario) -> dict:
    p = sc.hopf
    j0 = p.limit_cycle_action
    return {
        "omega": p.omega, "epsilon": p.epsilon, "c": p.c, "Dj": p.Dj,
        "limit_cycle_action": j0,
        "extremum_ratio": hopf.extremum_ratio(p),
        "density_ratio": hopf.stationary_action_density(p, j0) / hopf.stationary_action_density(p, 0.0),
        "density_at_minimum": hopf.stationary_action_density(p, 0.0),
        "density_at_maximum": hopf.stationary_action_density(p, j0),
    }


def _analysis_free(sc: Scenario) -> dict:
    obs = sc.measurement.observable
    mean, _ = _initial_second_moments(sc.init)
    out = {
        "observable": str(obs),
        "kappa": sc.measurement.kappa,
        "diffusion_tensor_at_initial_mean": _mat(diffusion_tensor(obs, mean)),
    }
    w = sc.system.constant_noise
    if w is not None and sc.ensemble is not None:
        cov0 = np.zeros((w.size, w.size)) if isinstance(sc.init, PointMass) else np.array(sc.init.cov)
        out["predicted_covariance"] = [
            {"t": t, "cov": _mat(cov0 + 2.0 * sc.measurement.kappa * t * np.outer(w, w))}
            for t in sc.ensemble.record_times
        ]
    if obs.n_dof == 1 and w is not None:
        out["conjugate_variable"] = str(conjugate_variable(obs))
    return out


def _composite_observables(pair: comp.OscillatorPair) -> dict[str, Callable]:
    def e1(X):
        return X[:, 1] ** 2 / (2 * pair.m) + pair.k * X[:, 0] ** 2 / 2

    def e2(X):
        return X[:, 3] ** 2 / (2 * pair.m) + pair.k * X[:, 2] ** 2 / 2

    return {
        "E1": e1,
        "E2": e2,
        "E1_minus_E2": lambda X: e1(X) - e2(X),
        "E1_plus_E2": lambda X: e1(X) + e2(X),
        "M_z": lambda X: X[:, 0] * X[:, 3] - X[:, 2] * X[:, 1],
        "x1p2": lambda X: X[:, 0] * X[:, 3],
        "x2p1": lambda X: X[:, 2] * X[:, 1],
    }


def run_scenario(sc: Scenario, n_workers: int = 1) -> RunResult:
    """Compute closed-form analysis and, when configured, the simulation artifacts."""
    if sc.kind == "linear":
        res = RunResult(_analysis_linear(sc))
    elif sc.kind == "composite":
        res = RunResult(_analysis_composite(sc))
    elif sc.kind == "hopf":
        res = RunResult(_analysis_hopf(sc))
    else:
        res = RunResult(_analysis_free(sc))

    if sc.kind == "hopf":
        if sc.hopf_run is not None:
            r = sc.hopf_run
            samples = hopf.simulate_action(sc.hopf, r["n_traj"], r["dt"], r["t_final"], r["seed"],
                                           r["sample_every"], burn_in=r["burn_in"])
            res.histogram = hopf.histogram_csv(sc.hopf, samples.j, sc.bins)
            res.analysis["simulation"] = {
                "n_samples": int(samples.j.size),
                "histogram_l1": hopf.histogram_l1(sc.hopf, samples.j, sc.bins),
                "mean_action": float(samples.j.mean()),
            }
        return res

    if sc.ensemble is None:
        return res
    obs = _composite_observables(sc.pair) if sc.kind == "composite" else None
    report = simulate_ensemble(sc.system, sc.init, sc.ensemble, scheme=sc.scheme,
                               observables=obs, n_workers=n_workers)
    res.timeseries = report.to_csv()
    sim = {"n_traj": report.n_traj, "final_cov": _mat(report.cov[-1]),
           "final_cov_stderr": _mat(report.cov_se[-1])}
    if sc.kind == "composite":
        sim.update(_composite_fit(sc, report))
    res.analysis["simulation"] = sim
    return res


def _composite_fit(sc: Scenario, report: MomentReport) -> dict:
    gap, _ = report.extra["E1_minus_E2"]
    rate = 4.0 * sc.pair.kappa
    t = report.times
    if rate == 0 or gap[0] == 0:
        return {"fitted_relaxation_rate": None}
    window = (t * rate <= 3.0) & (np.abs(gap) > 0)
    if window.sum() < 3:
        return {"fitted_relaxation_rate": None}
    fit = estimate_relaxation_rate(t[window], gap[window], limit=0.0)
    return {"fitted_relaxation_rate": fit.rate, "fit_r_squared": fit.r_squared}
