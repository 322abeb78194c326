import math

import numpy as np
import pytest

from mnl import composite as C
from mnl.dsl import parse_observable
from mnl.engine import EnsembleConfig, PointMass, SdeSystem, simulate_ensemble
from mnl.phase import MeasurementSpec, bracket
from oracles import GIBBS_E1_M1

UNIT = C.OscillatorPair(1.0, 1.0, 0.0)


def moments(**named):
    """Raw moment matrix from entries like x1x1=1, x1p2=0.5 (all others zero)."""
    idx = {"x1": 0, "p1": 1, "x2": 2, "p2": 3}
    S = np.zeros((4, 4))
    for key, v in named.items():
        a, b = idx[key[:2]], idx[key[2:]]
        S[a, b] = S[b, a] = v
    return C.SecondMoments4(S)


def test_energy_component_of_rhs():
    pair = C.OscillatorPair(1, 1, 0.5)
    s = moments(x1x1=1, p1p1=1)  # E1 = 1, E2 = 0
    ds = C.second_moment_rhs(pair, s)
    dE1, dE2 = ds.energies(pair)
    assert dE1 == pytest.approx(-1.0, abs=1e-14)
    assert dE2 == pytest.approx(1.0, abs=1e-14)


def test_cross_moment_component_of_rhs():
    pair = C.OscillatorPair(1, 1, 1.0)
    ds = C.second_moment_rhs(pair, moments(x1p2=1))
    # Hamiltonian part contributes p1p2 - x1x2 = 0; measurement -2 kappa (x1p2 + x2p1)
    assert ds["x1p2"] == pytest.approx(-2.0, abs=1e-14)


def test_generator_matches_hand_rolled_bracket_on_one_monomial():
    pair = C.OscillatorPair(1, 1, 0.3)
    R = C.moment_generator_matrix(pair)
    mz = C.angular_momentum()
    f = parse_observable("x1*x1", 2)
    H = C.hamiltonian(pair)
    rhs = C._quadratic_coefficients(bracket(f, H)) + 0.3 * C._quadratic_coefficients(bracket(mz, bracket(mz, f)))
    np.testing.assert_allclose(R[0], rhs, atol=1e-14)


def test_stationary_moments_are_fixed_points():
    for E, M, m, k, kappa in [(1, 0, 1, 1, 0.1), (1, 1, 1, 1, 0.5), (2.5, -1.2, 0.7, 1.9, 0.3)]:
        pair = C.OscillatorPair(m, k, kappa)
        ds = C.second_moment_rhs(pair, C.stationary_moments(E, M, pair))
        assert np.abs(ds.matrix).max() < 1e-12


def test_energy_relaxation_examples():
    assert C.energy_relaxation(2, 0, 0.25, 0) == (2, 0)
    e1, e2 = C.energy_relaxation(2, 0, 0.25, 1)
    assert (e1, e2) == pytest.approx((1 + math.exp(-1), 1 - math.exp(-1)))
    assert C.energy_relaxation(2, 0, 0.25, 200) == pytest.approx((1, 1))


def test_energy_relaxation_matches_moment_ode():
    pair = C.OscillatorPair(1.3, 0.8, 0.2)
    s0 = moments(x1x1=2.0, p1p1=1.0, x2p2=0.1, x1p2=0.3)
    E1, E2 = s0.energies(pair)
    for t, s in zip((0.5, 2.0), C.evolve_moments(pair, s0, (0.5, 2.0))):
        assert s.energies(pair) == pytest.approx(C.energy_relaxation(E1, E2, 0.2, t), rel=1e-12)


@pytest.mark.parametrize("E, M, expected", [
    (1, 0, np.eye(4)),
    (1, 1, np.array([[1, 0, 0, 0.5], [0, 1, -0.5, 0], [0, -0.5, 1, 0], [0.5, 0, 0, 1]])),
])
def test_stationary_moment_examples(E, M, expected):
    np.testing.assert_array_equal(C.stationary_moments(E, M, UNIT).matrix, expected)


def test_psd_bound_rejected():
    with pytest.raises(C.AdmissibilityError):
        C.stationary_moments(1, 2.1, UNIT)
    with pytest.raises(C.AdmissibilityError):
        C.gibbs_parameters(1, 2.0, UNIT)
    with pytest.raises(C.AdmissibilityError):
        C.beta_matrices(0, 0, UNIT)


def test_beta_matrices_examples():
    binv, beta = C.beta_matrices(1, 0, UNIT)
    np.testing.assert_array_equal(binv, np.eye(4))
    np.testing.assert_array_equal(beta, np.eye(4))
    _, beta = C.beta_matrices(1, 1, UNIT)
    expected = 4 / 3 * np.array([[1, 0, 0, -0.5], [0, 1, 0.5, 0], [0, 0.5, 1, 0], [-0.5, 0, 0, 1]])
    np.testing.assert_allclose(beta, expected, rtol=1e-15)


def test_gibbs_examples_and_temperature_identity():
    g = C.gibbs_parameters(1, 0, UNIT)
    assert (g.beta, g.Omega, g.KT_eff) == (1, 0, 1)
    g = C.gibbs_parameters(1, 1, UNIT)
    assert (g.beta, g.Omega, g.KT_eff) == pytest.approx(GIBBS_E1_M1, rel=1e-15)
    rng = np.random.default_rng(6)
    for _ in range(50):
        pair = C.OscillatorPair(*rng.uniform(0.3, 3, 2))
        E = rng.uniform(0.1, 5)
        M = rng.uniform(-0.99, 0.99) * pair.max_angular_momentum(E)
        g = C.gibbs_parameters(E, M, pair)
        assert g.KT_eff == pytest.approx(1 / g.beta, rel=1e-12)


def test_gibbs_quadratic_form_equals_entropy_matrix():
    pair = C.OscillatorPair(0.8, 1.7)
    E, M = 1.4, 0.9
    g = C.gibbs_parameters(E, M, pair)
    _, beta = C.beta_matrices(E, M, pair)
    y = np.random.default_rng(1).normal(size=(20, 4))
    # beta (H - Omega M_z) = y' beta y / 2
    np.testing.assert_allclose(g.effective_energy(pair, y), 0.5 * np.einsum("ni,ij,nj->n", y, beta, y), rtol=1e-12)


def test_conservation_rows_vanish_on_random_states():
    pair = C.OscillatorPair(1, 1, 0.37)
    R = C.moment_generator_matrix(pair)
    rng = np.random.default_rng(2)
    for _ in range(100):
        B = rng.normal(size=(4, 4))
        ds = C.SecondMoments4.from_vector(R @ C.SecondMoments4(B @ B.T).vector)
        e1, e2 = ds.energies(pair)
        assert abs(e1 + e2) < 1e-12 and abs(ds.angular_momentum) < 1e-12


def test_point_mass_start_keeps_an_undamped_mode():
    # x1^2 - p1^2 + x2^2 - p2^2 oscillates at 2 omega0 and never decays
    pair = C.OscillatorPair(1, 1, 0.1)
    ev = np.linalg.eigvals(C.moment_generator_matrix(pair))
    assert np.sum(np.abs(ev.real) < 1e-12) >= 4
    assert np.any(np.isclose(ev, 2j, atol=1e-12))
    s = C.evolve_moments(pair, moments(x1x1=4.0), [100.0])[0]
    assert abs(s["x1x1"] - s["p1p1"] + s["x2x2"] - s["p2p2"]) > 1.0


def test_simulation_matches_moment_ode():
    pair = C.OscillatorPair(1, 1, 0.2)
    spec = MeasurementSpec.from_text(C.ANGULAR_MOMENTUM, 2, 0.2)
    sys = SdeSystem.hamiltonian(C.hamiltonian(pair), spec)
    rep = simulate_ensemble(sys, PointMass((1.0, 0.5, 0.0, -0.3)),
                            EnsembleConfig(3000, 0.02, 2.0, 17, (2.0,)), scheme="trapezoidal")
    S0 = np.outer([1.0, 0.5, 0.0, -0.3], [1.0, 0.5, 0.0, -0.3])
    exact = C.evolve_moments(pair, C.SecondMoments4(S0), [2.0])[0].matrix
    assert np.all(np.abs(rep.second[-1] - exact) <= 3.5 * rep.second_se[-1] + 2e-3)


def test_admissibility_bound_value():
    assert C.OscillatorPair(4, 1).max_angular_momentum(1.0) == 4.0
    with pytest.raises(ValueError):
        C.OscillatorPair(-1, 1)
