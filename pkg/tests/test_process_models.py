import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nclab.errors import ValidationError
from nclab.process_models import (BernoulliFunctional, FiniteChain, beta_exact, build_bernoulli,
                                  estimate_beta, estimate_phi, export_trajectory, iid_chain,
                                  model_from_config, phi_exact, phi_report, simulate_chain,
                                  two_state_chain)


# ---- chains ---------------------------------------------------------------

def test_one_state_chain_is_constant():
    traj = simulate_chain(FiniteChain(np.array([[1.0]])), 5, seed=0)
    assert traj.tolist() == [0, 0, 0, 0, 0]


def test_deterministic_flip():
    flip = FiniteChain(np.array([[0.0, 1.0], [1.0, 0.0]]), initial=np.array([1.0, 0.0]))
    assert simulate_chain(flip, 5, seed=9).tolist() == [0, 1, 0, 1, 0]


def test_occupation_within_three_sigma():
    chain = two_state_chain(0.3, 0.3)
    n = 10**6
    traj = simulate_chain(chain, n, seed=17)
    lam = 0.4
    # asymptotic variance of the occupation indicator for a two-state chain
    sigma = np.sqrt(0.25 * (1 + lam) / (1 - lam) / n)
    assert abs(np.mean(traj == 0) - 0.5) <= 3 * sigma


def test_stationary_vector_of_asymmetric_chain():
    chain = two_state_chain(0.3, 0.4)
    np.testing.assert_allclose(chain.stationary(), [4 / 7, 3 / 7], atol=1e-14)


@pytest.mark.parametrize("P", [
    [[0.5, 0.6], [0.5, 0.5]],
    [[1.2, -0.2], [0.5, 0.5]],
    [[0.5, 0.5]],
])
def test_non_stochastic_matrix_rejected(P):
    with pytest.raises(ValidationError):
        FiniteChain(np.array(P))


def test_simulation_is_deterministic():
    chain = two_state_chain(0.2, 0.7)
    a = simulate_chain(chain, 2000, seed=4)
    b = simulate_chain(chain, 2000, seed=4)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != simulate_chain(chain, 2000, seed=5).tobytes()


def test_phi_iid_rows_is_zero():
    chain = iid_chain([0.2, 0.5, 0.3])
    assert all(phi_exact(chain, n) == 0.0 for n in range(1, 8))


def test_phi_two_cycle_is_half():
    cyc = FiniteChain(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert all(phi_exact(cyc, n) == pytest.approx(0.5, abs=1e-15) for n in range(1, 10))


def test_phi_symmetric_chain_closed_form():
    chain = two_state_chain(0.3, 0.3)
    for n in range(1, 12):
        Pn = np.eye(2)
        for _ in range(n):
            Pn = Pn @ chain.transition
        brute = 0.5 * np.abs(Pn - 0.5).sum(axis=1).max()
        assert phi_exact(chain, n) == pytest.approx(brute, abs=1e-15)
        assert phi_exact(chain, n) == pytest.approx(0.5 * 0.4 ** n, rel=1e-10)


def test_phi_reducible_chain_rejected():
    with pytest.raises(ValidationError):
        phi_exact(FiniteChain(np.eye(2)), 1)


def test_phi_report_fit_is_exponential():
    rep = phi_report(two_state_chain(0.3, 0.3), [1, 2, 4, 8])
    assert rep.fit["model"] == "exponential"
    assert rep.fit["rate"] == pytest.approx(-np.log(0.4), rel=1e-8)
    json.loads(rep.to_json())


def test_estimate_phi_brackets_exact_value():
    chain = two_state_chain(0.3, 0.4)
    traj = simulate_chain(chain, 200_000, seed=3)
    est = estimate_phi(traj, [1, 2, 4])
    for n, (val, lo, hi) in est.items():
        assert lo <= phi_exact(chain, n) <= hi


@st.composite
def stochastic_matrices(draw):
    S = draw(st.integers(1, 5))
    raw = draw(arrays(float, (S, S), elements=st.floats(0.01, 1.0)))
    return raw / raw.sum(axis=1, keepdims=True)


@given(stochastic_matrices(), st.integers(1, 30))
def test_phi_in_unit_interval(P, n):
    chain = FiniteChain(P)
    assert 0.0 <= phi_exact(chain, n) <= 1.0


@given(arrays(float, 4, elements=st.floats(0.01, 1.0)), st.integers(1, 20))
def test_phi_vanishes_for_iid_rows(p, n):
    chain = iid_chain(p / p.sum())
    assert phi_exact(chain, n) <= 1e-15


@given(stochastic_matrices())
def test_sampled_marginal_matches_stationary(P):
    chain = FiniteChain(P)
    rng = np.random.default_rng(0)
    X = chain.sample_states_at(np.array([1, 3, 10]), 20_000, rng)
    pi = chain.stationary()
    for col in range(3):
        freq = np.bincount(X[:, col], minlength=chain.states) / X.shape[0]
        assert np.all(np.abs(freq - pi) <= 5 * np.sqrt(pi * (1 - pi) / X.shape[0]) + 1e-12)


# ---- Bernoulli functionals ------------------------------------------------

def test_finite_window_is_exact_for_large_r():
    bf = BernoulliFunctional(weights=np.array([0.5, 1.0, -0.7, 0.2, 0.1]), real_dist="normal", g="tanh")
    traj = build_bernoulli(bf, 300, [2, 3, 5], seed=1)
    for r in (2, 3, 5):
        assert np.all(traj.distances(r) == 0.0)
    assert estimate_beta(traj, 2.0, [2, 3, 5]).beta[(2.0, 2)][0] == 0.0


def test_r_zero_equals_primary_for_single_coordinate():
    bf = BernoulliFunctional(weights=np.array([0.0, 1.0, 0.0]), real_dist="uniform", g="linear")
    traj = build_bernoulli(bf, 200, [0], seed=8)
    np.testing.assert_array_equal(traj.approximants[0], traj.primary)


def test_geometric_weights_decay_rate_ln2():
    J = 20
    w = 2.0 ** -np.abs(np.arange(-J, J + 1))
    bf = BernoulliFunctional(weights=w, real_dist="normal", g="linear")
    traj = build_bernoulli(bf, 5000, list(range(0, 11)), seed=2)
    rep = estimate_beta(traj, 2.0)
    assert rep.fit["model"] == "exponential"
    assert rep.fit["theta"] == float("inf")
    assert abs(rep.fit["rate"] - np.log(2)) <= 0.1 * np.log(2)


def test_window_locality():
    bf = BernoulliFunctional(weights=np.array([0.3, -1.0, 2.0, 0.5, 0.25]), alphabet=np.array([-1.0, 0.0, 1.0]))
    N, J, r = 60, 2, 1
    times = np.arange(1 - J, N + J + 1)
    rng = np.random.default_rng(5)
    base = rng.choice([-1.0, 0.0, 1.0], size=times.size)
    ref = build_bernoulli(bf, N, [r], seed=11, main_noise=base)
    for n in (1, 17, 60):
        other = base.copy()
        outside = np.abs(times - n) > r
        other[outside] = rng.choice([-1.0, 0.0, 1.0], size=outside.sum())
        alt = build_bernoulli(bf, N, [r], seed=11, main_noise=other)
        assert alt.approximants[r][n - 1] == ref.approximants[r][n - 1]


def test_constant_g_has_zero_beta():
    bf = BernoulliFunctional(weights=np.zeros(5), real_dist="normal")
    traj = build_bernoulli(bf, 100, [0, 1, 2], seed=0)
    rep = estimate_beta(traj, 1.5)
    assert all(v[0] == 0.0 for v in rep.beta.values())


def test_beta_estimate_within_ci_of_enumeration():
    bf = BernoulliFunctional(weights=np.array([0.5, 1.0, 0.3]), alphabet=np.array([-1.0, 1.0]),
                             probs=np.array([0.3, 0.7]), g="tanh")
    traj = build_bernoulli(bf, 40_000, [0, 1], seed=6)
    rep = estimate_beta(traj, 2.0)
    for r in (0, 1):
        est, lo, hi = rep.beta[(2.0, r)]
        exact = beta_exact(bf, r, 2.0)
        assert lo <= exact <= hi
    assert beta_exact(bf, 1, 2.0) == 0.0


def test_beta_rejects_p_below_one():
    bf = BernoulliFunctional(weights=np.ones(3), real_dist="normal")
    with pytest.raises(ValidationError):
        estimate_beta(build_bernoulli(bf, 10, [0], seed=0), 0.5)


def test_bernoulli_build_is_deterministic():
    bf = BernoulliFunctional(weights=np.array([1.0, 2.0, 1.0]), real_dist="normal", g="sign")
    a = build_bernoulli(bf, 500, [0, 1], seed=21)
    b = build_bernoulli(bf, 500, [0, 1], seed=21)
    assert a.primary.tobytes() == b.primary.tobytes()
    assert a.approximants[0].tobytes() == b.approximants[0].tobytes()


@given(st.integers(0, 3), st.integers(0, 50))
def test_beta_nonincreasing_in_r(J, seed):
    bf = BernoulliFunctional(weights=np.linspace(1, 2, 2 * J + 1), alphabet=np.array([0.0, 1.0]))
    vals = [beta_exact(bf, r, 2.0) for r in range(0, J + 2)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_stationary_law_enumeration():
    bf = BernoulliFunctional(weights=np.array([1.0, 1.0, 1.0]), alphabet=np.array([0.0, 1.0]))
    atoms, w = bf.stationary_law()
    np.testing.assert_array_equal(atoms, [0, 1, 2, 3])
    np.testing.assert_allclose(w, [1 / 8, 3 / 8, 3 / 8, 1 / 8])


def test_model_from_config_and_export(tmp_path):
    chain = model_from_config({"kind": "two_state", "p": 0.3, "q": 0.4})
    assert isinstance(chain, FiniteChain)
    bf = model_from_config({"kind": "bernoulli", "geometric": 0.5, "J": 3, "real_dist": "normal"})
    assert bf.weights.size == 7
    with pytest.raises(ValidationError):
        model_from_config({"kind": "nope"})
    traj = simulate_chain(chain, 10, seed=0)
    export_trajectory(traj, str(tmp_path / "t.csv"))
    export_trajectory(traj, str(tmp_path / "t.npy"))
    assert np.load(tmp_path / "t.npy").tolist() == traj.tolist()
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "n,value" and len(lines) == 11
