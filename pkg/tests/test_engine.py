import math
import warnings

import numpy as np
import pytest

from mnl import rng
from mnl.dsl import evaluate, parse_observable
from mnl.engine import (
    CHUNK_SIZE, EnsembleConfig, FitQualityWarning, Gaussian, MomentReport, PointMass,
    SdeSystem, SimulationBlowUp, estimate_relaxation_rate, euler_maruyama_ito_step,
    heun_stratonovich_step, simulate_ensemble, trapezoidal_stratonovich_step,
)
from mnl.phase import MeasurementSpec

MZ_TEXT = "q1*p2 - q2*p1"


def spec(text, n, kappa):
    return MeasurementSpec.from_text(text, n, kappa)


# --- single steps ----------------------------------------------------------

def test_noise_off_step_is_ode_heun():
    A = np.array([[-0.3, 1.0], [-2.0, -0.1]])
    sys = SdeSystem.linear(A, spec("p1", 1, 0.0))
    x, dt = np.array([0.7, -0.4]), 0.05
    pred = x + dt * A @ x
    expected = x + 0.5 * dt * (A @ x + A @ pred)
    np.testing.assert_allclose(heun_stratonovich_step(sys, x, dt, 0.123), expected, rtol=1e-15)


def test_constant_noise_step_is_exact_increment():
    sys = SdeSystem.linear(np.zeros((2, 2)), spec("p1", 1, 0.5))
    out = heun_stratonovich_step(sys, np.array([0.2, 0.9]), 0.01, 0.037)
    assert out.tolist() == [0.2 + 0.037, 0.9]


def test_heun_angular_momentum_error_is_second_order():
    zero = [parse_observable("0", 2)] * 4
    sys = SdeSystem.from_fields(zero, spec(MZ_TEXT, 2, 1.0))
    mz = parse_observable(MZ_TEXT, 2)
    x = np.array([1.0, 0.5, -0.3, 0.8])
    errs = []
    for dt in (0.02, 0.01, 0.005):
        dW = 0.7 * math.sqrt(dt)
        errs.append(abs(evaluate(mz, heun_stratonovich_step(sys, x, dt, dW)) - evaluate(mz, x)))
    assert errs[1] / errs[0] < 0.3 and errs[2] / errs[1] < 0.3
    assert errs[0] < 5e-3


def test_trapezoidal_conserves_quadratic_invariants():
    H = parse_observable("p1^2/2 + q1^2/2 + p2^2/2 + q2^2/2", 2)
    sys = SdeSystem.hamiltonian(H, spec(MZ_TEXT, 2, 0.4))
    mz = parse_observable(MZ_TEXT, 2)
    x = np.array([1.0, 0.5, -0.3, 0.8])
    y = x.copy()
    for dW in np.random.default_rng(0).normal(0, 0.1, 200):
        y = trapezoidal_stratonovich_step(sys, y, 0.01, dW)
    assert evaluate(mz, y) == pytest.approx(evaluate(mz, x), abs=1e-13)
    assert evaluate(H, y) == pytest.approx(evaluate(H, x), abs=1e-13)


def test_ito_step_uses_corrected_drift():
    sys = SdeSystem.linear(np.zeros((2, 2)), spec("(q1^2+p1^2)/2", 1, 0.5))
    out = euler_maruyama_ito_step(sys, np.array([1.0, 2.0]), 0.1, 0.0)
    # B = kappa * (-q, -p)
    np.testing.assert_allclose(out, [1.0 - 0.05, 2.0 - 0.1])


def test_batch_and_single_steps_agree():
    sys = SdeSystem.linear([[-1, 0.5], [-0.5, -1]], spec("q1*p1", 1, 0.3))
    X = np.random.default_rng(2).normal(size=(5, 2))
    dW = np.random.default_rng(3).normal(size=5) * 0.1
    batch = heun_stratonovich_step(sys, X, 0.01, dW)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], heun_stratonovich_step(sys, X[i], 0.01, dW[i]))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        SdeSystem.linear(np.eye(4), spec("p1", 1, 1.0))


# --- configuration ---------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(n_traj=0, dt=0.1, t_final=1, seed=1, record_times=(1.0,)),
    dict(n_traj=1, dt=2.0, t_final=1, seed=1, record_times=(1.0,)),
    dict(n_traj=1, dt=0.1, t_final=1, seed=1, record_times=(0.5, 0.5)),
    dict(n_traj=1, dt=0.1, t_final=1, seed=1, record_times=(0.55,)),
    dict(n_traj=1, dt=0.1, t_final=1, seed=1, record_times=(1.5,)),
    dict(n_traj=1, dt=0.1, t_final=1, seed=1, record_times=()),
])
def test_ensemble_config_validation(kwargs):
    with pytest.raises(ValueError):
        EnsembleConfig(**kwargs)


def test_uniform_record_times():
    cfg = EnsembleConfig.uniform(10, 0.01, 1.0, 0, 4)
    assert cfg.record_times == (0.0, 0.25, 0.5, 0.75, 1.0)


def test_gaussian_rejects_bad_covariance():
    with pytest.raises(ValueError):
        Gaussian((0, 0), [[1, 0], [0, -1]])
    with pytest.raises(ValueError):
        Gaussian((0, 0), [[1, 0.5], [0, 1]])


# --- ensembles -------------------------------------------------------------

def test_ornstein_uhlenbeck_small_ensemble():
    sys = SdeSystem.linear(-np.eye(2), spec("p1", 1, 1.0))
    cfg = EnsembleConfig(3000, 0.01, 1.0, 42, (0.5, 1.0))
    rep = simulate_ensemble(sys, PointMass((0, 0)), cfg)
    for i, t in enumerate(rep.times):
        # exact for the constant-noise OU process: 1 - exp(-2t)
        assert abs(rep.cov[i, 0, 0] - (1 - math.exp(-2 * t))) < 3 * rep.cov_se[i, 0, 0]
        assert rep.cov[i, 1, 1] == 0.0


def test_weak_convergence_in_dt():
    # mean of q1^2 under a nonlinear noise field; the bias must shrink with dt
    sys = SdeSystem.linear([[-1.0, 0.0], [0.0, -1.0]], spec("(q1^2+p1^2)/2", 1, 0.5))
    init = PointMass((1.0, 0.0))
    exact_mean_energy = 0.5 * math.exp(-2.0)  # noise flow preserves energy; drift halves radius e^-t
    errs = []
    for dt in (0.1, 0.05):
        cfg = EnsembleConfig(4000, dt, 1.0, 9, (1.0,))
        rep = simulate_ensemble(sys, init, cfg)
        e = 0.5 * (rep.second[-1, 0, 0] + rep.second[-1, 1, 1])
        errs.append(abs(e - exact_mean_energy))
    assert errs[1] < errs[0]
    assert errs[1] < 2e-3


def test_ito_and_stratonovich_schemes_agree():
    sys = SdeSystem.linear([[-0.5, 1.0], [-1.0, -0.5]], spec("q1*p1", 1, 0.2))
    init = PointMass((1.0, 0.5))
    cfg = EnsembleConfig(6000, 0.005, 1.0, 4, (1.0,))
    a = simulate_ensemble(sys, init, cfg, scheme="heun")
    b = simulate_ensemble(sys, init, cfg, scheme="ito-euler")
    se = np.hypot(a.second_se[-1], b.second_se[-1])
    assert np.all(np.abs(a.second[-1] - b.second[-1]) <= 3 * se + 5e-3)


def test_noise_off_hamiltonian_preserves_energy():
    H = parse_observable("p1^2/2 + q1^2/2", 1)
    sys = SdeSystem.hamiltonian(H, spec("p1", 1, 0.0))
    cfg = EnsembleConfig(3, 0.01, 10.0, 0, (10.0,))
    rep = simulate_ensemble(sys, PointMass((1.0, 0.0)), cfg, keep_final=True)
    energy = 0.5 * (rep.final_samples ** 2).sum(axis=1)
    # Heun amplifies the oscillator energy by (1 + dt^4/4) per step
    np.testing.assert_allclose(energy, 0.5 * (1 + 0.01 ** 4 / 4) ** 1000, rtol=1e-9)


def test_deterministic_across_worker_counts_and_repeats():
    sys = SdeSystem.linear([[-1, 0.3], [-0.3, -1]], spec("q1 + p1", 1, 0.4))
    cfg = EnsembleConfig(2 * CHUNK_SIZE + 17, 0.05, 0.5, 123, (0.25, 0.5))
    init = Gaussian((0.1, 0.0), [[0.2, 0.0], [0.0, 0.1]])
    one = simulate_ensemble(sys, init, cfg, n_workers=1).to_csv()
    three = simulate_ensemble(sys, init, cfg, n_workers=3).to_csv()
    again = simulate_ensemble(sys, init, cfg, n_workers=1).to_csv()
    assert one == three == again


def test_trajectory_streams_do_not_depend_on_ensemble_size():
    sys = SdeSystem.linear(-np.eye(2), spec("p1", 1, 1.0))
    small = simulate_ensemble(sys, PointMass((0, 0)), EnsembleConfig(3, 0.1, 1, 8, (1.0,)), keep_final=True)
    big = simulate_ensemble(sys, PointMass((0, 0)), EnsembleConfig(50, 0.1, 1, 8, (1.0,)), keep_final=True)
    np.testing.assert_array_equal(small.final_samples, big.final_samples[:3])


def test_blow_up_reports_time_and_trajectory():
    cubic = [parse_observable("q1^3", 1), parse_observable("0", 1)]
    sys = SdeSystem.from_fields(cubic, spec("p1", 1, 0.0))
    with pytest.raises(SimulationBlowUp) as info:
        simulate_ensemble(sys, PointMass((10.0, 0.0)), EnsembleConfig(2, 0.1, 5.0, 0, (5.0,)))
    assert info.value.trajectory == 0
    assert 0 < info.value.time <= 5.0


def test_moment_report_columns_and_round_trip():
    sys = SdeSystem.linear(-np.eye(2), spec("p1", 1, 1.0))
    rep = simulate_ensemble(sys, PointMass((0, 0)), EnsembleConfig(20, 0.1, 1, 1, (0.5, 1.0)),
                            observables={"q1sq": lambda X: X[:, 0] ** 2})
    header = rep.to_csv().splitlines()[0].split(",")
    assert header[:3] == ["t", "mean_q1", "mean_p1"]
    assert "cov_q1_p1" in header and "stderr_q1sq" in header
    back = MomentReport.from_dict(rep.to_dict())
    assert back.to_csv() == rep.to_csv()
    assert rep.at(0.5) == 0
    with pytest.raises(KeyError):
        rep.at(0.7)


def test_covariance_is_psd_within_error():
    sys = SdeSystem.linear([[-1, 1], [-1, -1]], spec("q1*p1", 1, 0.3))
    rep = simulate_ensemble(sys, PointMass((1, 1)), EnsembleConfig(500, 0.02, 2, 5, (1.0, 2.0)))
    for C, se in zip(rep.cov, rep.cov_se):
        assert np.linalg.eigvalsh(C).min() >= -3 * se.max()


def test_rng_split_draws_equal_single_draw():
    a = rng.trajectory_stream(5, 7).standard_normal(10)
    g = rng.trajectory_stream(5, 7)
    b = np.concatenate([g.standard_normal(4), g.standard_normal(6)])
    np.testing.assert_array_equal(a, b)
    assert rng.stream_key(5, 7, rng.NOISE) != rng.stream_key(5, 7, rng.INITIAL)


# --- relaxation fit ----------------------------------------------------------

def test_fit_exact_exponential():
    t = np.linspace(0, 5, 30)
    fit = estimate_relaxation_rate(t, 3.0 * np.exp(-4 * 0.25 * t))
    assert fit.rate == pytest.approx(1.0, abs=1e-10)
    assert not fit.flagged


def test_fit_with_nonzero_limit():
    t = np.linspace(0, 3, 20)
    fit = estimate_relaxation_rate(t, 1.0 + np.exp(-0.7 * t), limit=1.0)
    assert fit.rate == pytest.approx(0.7, abs=1e-10)


def test_fit_constant_series_is_flagged():
    with pytest.warns(FitQualityWarning):
        fit = estimate_relaxation_rate(np.arange(5.0), np.full(5, 2.0))
    assert fit.rate == 0.0 and fit.flagged and math.isnan(fit.r_squared)


def test_fit_noisy_series_warns():
    t = np.linspace(0, 1, 40)
    y = 1.0 + 0.5 * np.sin(37 * t)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = estimate_relaxation_rate(t, y)
    assert fit.flagged and any(issubclass(w.category, FitQualityWarning) for w in caught)
