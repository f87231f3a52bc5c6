import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nclab.errors import UnsupportedError, ValidationError
from nclab.noncon_engine import (FiniteMeasure, IndexFamily, Observable, asymptotic_variance,
                                 build_Xi, build_Y_process, chain_joint_law, classification_json,
                                 constant_observable, decompose, exact_sum_law, exact_sum_variance,
                                 green_kubo, independent_variance, lattice_classify, y_mixing_check,
                                 marginal_measure, noncon_sum, observable_from_config, pair_statistic,
                                 product_indicator, product_observable, sample_sums, zeta,
                                 zeta_expansion_check, zeta_identity_error, zeta_lipschitz_constant,
                                 zeta_table_csv, zeta_y, zeta_y_table)
from nclab.process_models import (BernoulliFunctional, build_bernoulli, iid_chain, two_state_chain)

BERN = FiniteMeasure([0.0, 1.0], [0.5, 0.5])
XY = product_observable(2)
LIN2 = IndexFamily.polynomial([[0, 1], [0, 1, 1]])


# ---- index families and sums ----------------------------------------------

def test_polynomial_family_detects_linear_prefix():
    assert LIN2.k == 1 and LIN2.ell == 2
    assert IndexFamily.polynomial([[0, 1], [0, 2], [0, 0, 1]]).k == 2
    assert IndexFamily.polynomial([[0, 0, 1], [0, 0, 0, 1]]).k == 0
    np.testing.assert_array_equal(LIN2.table(4), [[1, 2, 3, 4], [2, 6, 12, 20]])


def test_linear_prefix_enforced():
    with pytest.raises(ValidationError):
        IndexFamily.polynomial([[0, 1], [0, 0, 1]], k=2)


def test_growth_and_separation_checks():
    assert LIN2.check_growth(200)[2]["status"] == "range-verified"
    sq = IndexFamily.polynomial([[0, 0, 1], [0, 0, 0, 1]])
    sep = sq.check_separation(200)
    assert sep[(1, 0.5)]["status"] == "range-verified"
    # q_2(0.1 n) − q_1(n) = n³/1000 − n² is still negative at n = 200
    assert sep[(1, 0.1)]["status"] == "failed"
    slow = IndexFamily(q=(lambda n: n, lambda n: 3 * n), k=1)
    assert slow.check_growth(100)[2]["status"] == "failed"


def test_lemma_constants_frozen():
    assert LIN2.lemma_constants(16, 64) == {"a": 0.4, "delta0": 0.5, "source": "grid", "status": "range-verified"}
    sq = IndexFamily.polynomial([[0, 0, 1], [0, 0, 0, 1]])
    assert sq.lemma_constants(16, 64)["a"] == 0.45
    k2 = IndexFamily.polynomial([[0, 1], [0, 2], [0, 0, 1]])
    lc = k2.lemma_constants(16, 64)
    assert lc["source"] == "default" and lc["a"] == 1 - 1 / 8 and lc["delta0"] == 1 / 6


@given(st.integers(16, 40), st.integers(41, 120))
def test_lemma_constants_satisfy_inequality(lo, hi):
    lc = LIN2.lemma_constants(lo, hi)
    N = np.arange(lo, hi + 1)
    M = np.floor(lc["a"] * N).astype(int)
    assert np.all(N + lc["delta0"] * N <= M ** 2 + M - lc["delta0"] * N)


def test_constant_sum():
    traj = np.arange(100.0)
    assert noncon_sum(traj, LIN2, constant_observable(2.5, 2), 7) == 17.5


def test_birkhoff_sum():
    q = IndexFamily.polynomial([[0, 1]])
    traj = np.random.default_rng(0).standard_normal(50)
    G = Observable(lambda x: x ** 2, 1)
    assert noncon_sum(traj, q, G, 20) == pytest.approx(np.sum(traj[1:21] ** 2), rel=1e-14)


def test_hand_enumerated_sum():
    q = IndexFamily.polynomial([[0, 1], [0, 0, 1]])
    traj = np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 1, 1], dtype=float)
    # n = 1..4: (X1 X1) + (X2 X4) + (X3 X9) + (X4 X16)
    hand = 1 * 1 + 1 * 1 + 0 * 1 + 1 * 1
    assert noncon_sum(traj, q, XY, 4) == hand


def test_trajectory_too_short():
    with pytest.raises(ValidationError):
        noncon_sum(np.ones(10), LIN2, XY, 5)


def test_approximant_sum_equals_sum_past_window():
    bf = BernoulliFunctional(weights=np.array([1.0, -1.0, 2.0]), alphabet=np.array([0.0, 1.0]))
    traj = build_bernoulli(bf, 200, [0, 1, 2], seed=3)
    G = Observable(lambda x, y: x * y + x, 2)
    exact = noncon_sum(traj, LIN2, G, 12)
    assert noncon_sum(traj, LIN2, G, 12, r=1) == exact
    assert noncon_sum(traj, LIN2, G, 12, r=2) == exact
    with pytest.raises(ValidationError):
        noncon_sum(np.ones(400), LIN2, G, 12, r=1)


# ---- observables ----------------------------------------------------------

def test_observable_checks():
    G = observable_from_config({"kind": "linear", "coeffs": [1.0, -2.0], "ell": 2})
    xs = np.random.default_rng(1).random((100, 2))
    ys = np.random.default_rng(2).random((100, 2))
    assert G.check_holder(xs, ys)
    ind = product_indicator(1.0, 2)
    assert ind.check_bound(xs) and ind.integer_valued
    with pytest.raises(ValidationError):
        G(np.ones(3))
    with pytest.raises(ValidationError):
        observable_from_config({"kind": "spline"})


# ---- decomposition --------------------------------------------------------

def test_first_slot_only_is_degenerate():
    G = Observable(lambda x, y: np.sin(x) + 0 * y, 2)
    mu = FiniteMeasure([0.0, 1.0, 2.0], [0.2, 0.3, 0.5])
    dec = decompose(G, mu)
    assert np.max(np.abs(dec.components[2])) <= 1e-15
    assert lattice_classify(G, mu)["verdict"] == "degenerate"


def test_product_indicator_mean():
    dec = decompose(product_indicator(1.0, 2), BERN)
    assert dec.g_bar == 0.25


def test_telescoping_three_symbols():
    mu = FiniteMeasure([-1.0, 0.5, 2.0], [0.2, 0.5, 0.3])
    G = Observable(lambda x, y, z: np.cos(x * y) + z * x ** 2 - y * z, 3)
    for k in (0, 1, 2):
        dec = decompose(G, mu, k=k)
        assert dec.telescoping_error() <= 1e-14
        assert dec.centering_error() <= 1e-14


@given(arrays(float, (3, 3), elements=st.floats(-5, 5)), arrays(float, 3, elements=st.floats(0.05, 1)))
def test_decomposition_identities(table, w):
    mu = FiniteMeasure([0.0, 1.0, 2.0], w / w.sum())
    G = Observable(lambda x, y: table[x.astype(int), y.astype(int)], 2)
    dec = decompose(G, mu)
    assert dec.telescoping_error() <= 1e-12
    assert dec.centering_error() <= 1e-12


def test_decomposition_csv(tmp_path):
    dec = decompose(XY, BERN)
    dec.to_csv(str(tmp_path / "d.csv"))
    assert (tmp_path / "d.csv").read_text().count("\n") > 2


# ---- variance -------------------------------------------------------------

def test_constant_observable_has_zero_variance():
    rep = asymptotic_variance(iid_chain([0.5, 0.5]), LIN2, constant_observable(1.0, 2), [8, 16], 100)
    assert rep.estimate == 0.0 and rep.degenerate


def test_fully_separated_iid_variance():
    q = IndexFamily(q=(lambda n: 3 * (np.int64(1) << n), lambda n: 5 * (np.int64(1) << n)), n_limit=40)
    model = iid_chain([0.5, 0.5])
    rep = asymptotic_variance(model, q, XY, [8, 16, 32], 40_000, seed=2)
    target = independent_variance(XY, BERN)
    assert target == 3 / 16
    for row in rep.rows:
        assert row["lower"] <= target <= row["upper"]


def test_green_kubo_birkhoff():
    chain = two_state_chain(0.3, 0.4)
    q = IndexFamily.polynomial([[0, 1]])
    G = Observable(lambda x: x, 1)
    gk = green_kubo(chain, chain.values)
    rep = asymptotic_variance(chain, q, G, [200, 400, 800], 20_000, seed=4)
    assert abs(rep.estimate - gk) <= 0.05 * gk
    exact = exact_sum_variance(chain, q, G, 200) / 200
    assert abs(exact - gk) <= 0.05 * gk


def test_golden_lattice_variance_exact():
    model = iid_chain([0.5, 0.5])
    v = exact_sum_variance(model, LIN2, XY, 1024) / 1024
    assert v == pytest.approx(0.19128, abs=5e-5)
    vals, probs = exact_sum_law(model, LIN2, XY, 6)
    mean = float(np.dot(vals, probs))
    assert probs.sum() == pytest.approx(1.0, abs=1e-14)
    assert mean == pytest.approx(6 * 0.25, abs=1e-14)
    assert float(np.dot(vals ** 2, probs)) - mean ** 2 == pytest.approx(
        exact_sum_variance(model, LIN2, XY, 6), abs=1e-12)


def test_exact_law_matches_chain_law():
    chain = two_state_chain(0.3, 0.4)
    states, probs = chain_joint_law(chain, [1, 2, 5])
    assert states.shape == (8, 3) and probs.sum() == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValidationError):
        chain_joint_law(chain, [3, 2])


def test_sample_sums_thread_independent():
    model = two_state_chain(0.3, 0.4)
    a = sample_sums(model, LIN2, XY, [16, 32], 3000, seed=9, threads=1, chunk_cells=2000)
    b = sample_sums(model, LIN2, XY, [16, 32], 3000, seed=9, threads=3, chunk_cells=2000)
    assert a.tobytes() == b.tobytes()


# ---- ζ functions ----------------------------------------------------------

def test_zeta_at_zero_and_pi():
    assert zeta(XY, BERN, 0.0) == 1.0
    assert zeta(XY, BERN, np.pi) == 0.5


@given(st.floats(-30, 30))
def test_zeta_closed_form(t):
    z = float(zeta(XY, BERN, t))
    assert z == pytest.approx(0.5 + abs(np.cos(t / 2)) / 2, abs=1e-14)
    assert z <= 1.0
    assert z == float(zeta(XY, BERN, -t))


@given(arrays(float, (3, 3), elements=st.floats(-3, 3)), st.floats(-20, 20))
def test_zeta_bounded_and_identity(table, t):
    mu = FiniteMeasure([0.0, 1.0, 2.0], [0.2, 0.3, 0.5])
    G = Observable(lambda x, y: table[x.astype(int), y.astype(int)], 2)
    assert 0.0 <= float(zeta(G, mu, t)) <= 1.0
    assert zeta_identity_error(G, mu, 1, t) <= 1e-14


def test_zeta_identity_for_y_process():
    mu = FiniteMeasure([0.0, 1.0, 3.0], [0.3, 0.3, 0.4])
    G = Observable(lambda x, y, z: x * y + np.sin(z * x) + z, 3)
    for k in (0, 1, 2):
        for t in (0.3, 1.0, 2.7):
            assert zeta_identity_error(G, mu, k, t) <= 1e-14
    assert zeta_y(XY, BERN, [0.0], 1.0) == 1.0
    assert abs(zeta_y(XY, BERN, [1.0], np.pi)) <= 1e-15


def test_zeta_lipschitz_certificate():
    for t in (0.5, 1.0, 2.0):
        C = zeta_lipschitz_constant(XY, BERN, 1, t)
        tab = zeta_y_table(XY, BERN, 1, t)
        assert abs(tab[0] - tab[1]) <= C * abs(t) * 1.0 + 1e-15
        assert C <= 1.0


def test_degenerate_zeta_is_one():
    G = Observable(lambda x, y: 3 * x + 0 * y, 2)
    assert np.all(np.asarray(zeta(G, BERN, np.linspace(-5, 5, 41))) == 1.0)


def test_expansion_curvature_product_indicator():
    chk = zeta_expansion_check(product_indicator(1.0, 2), BERN)
    assert chk.curvature_exact == 1 / 8
    assert abs(chk.curvature_fd - 1 / 8) <= 1e-3
    assert chk.slope >= 2.9 and chk.passed


def test_lattice_verdicts():
    assert lattice_classify(product_indicator(1.0, 2), BERN)["verdict"] == "lattice"
    # y + πx on {0, 1}: the last coordinate still lives on the integers
    res = lattice_classify(Observable(lambda x, y: y + np.pi * x, 2), BERN)
    assert res["verdict"] == "lattice" and res["span"] == pytest.approx(1.0, abs=1e-9)
    na = lattice_classify(Observable(lambda x, y: y + np.pi * x * y, 2), BERN)
    assert na["verdict"] == "non-arithmetic" and na["zeta_max"] < 1
    import json
    json.loads(classification_json(na))
    with pytest.raises(UnsupportedError):
        lattice_classify(XY, "not a measure")


def test_zeta_csv(tmp_path):
    zeta_table_csv(XY, BERN, [0.0, 1.0, np.pi], str(tmp_path / "z.csv"))
    rows = (tmp_path / "z.csv").read_text().splitlines()
    assert rows[0] == "t,zeta" and float(rows[3].split(",")[1]) == 0.5


def test_measure_validation():
    with pytest.raises(ValidationError):
        FiniteMeasure([0.0, 0.0], [0.5, 0.5])
    with pytest.raises(ValidationError):
        FiniteMeasure([0.0, 1.0], [0.6, 0.6])
    mu = marginal_measure(two_state_chain(0.3, 0.4))
    np.testing.assert_allclose(mu.weights, [4 / 7, 3 / 7])


# ---- auxiliary processes --------------------------------------------------

def test_y_process_k_one_is_the_copy():
    chain = two_state_chain(0.3, 0.4)
    Y = build_Y_process(chain, 1, 30, 50, seeds=[7])
    X = chain.sample_at(np.arange(1, 31), 50, np.random.default_rng(7))
    np.testing.assert_array_equal(Y[:, :, 0], X)


def test_y_process_iid_uncorrelated():
    model = iid_chain([0.5, 0.5])
    Y = build_Y_process(model, 2, 20, 20_000, seeds=[1, 2])
    Yc = Y - 0.5
    corr = pair_statistic(Yc, 1)
    sigma = 0.25 / np.sqrt(Y.shape[0] * Y.shape[2])
    assert np.all(np.abs(corr) <= 3 * sigma * 1.5)


def test_y_process_stationary_pairs():
    chain = two_state_chain(0.3, 0.4)
    Y = build_Y_process(chain, 2, 12, 40_000, seeds=[3, 4])
    stat = pair_statistic(Y, 2)
    assert np.ptp(stat) <= 6 * 0.5 / np.sqrt(Y.shape[0] * 2)


def test_overlapping_seeds_rejected():
    with pytest.raises(ValidationError):
        build_Y_process(iid_chain([0.5, 0.5]), 2, 5, 10, seeds=[1, 1])


def test_y_approximants_for_bernoulli():
    bf = BernoulliFunctional(weights=np.array([0.5, 1.0, 0.5]), real_dist="normal")
    Y, Yr = build_Y_process(bf, 2, 10, 100, seeds=[1, 2], r=1)
    np.testing.assert_array_equal(Y, Yr)
    with pytest.raises(UnsupportedError):
        build_Y_process(iid_chain([0.5, 0.5]), 1, 5, 10, seeds=[1], r=0)


def test_xi_process(golden):
    Xi = build_Xi(golden, 3, 10, 50, seeds=[1, 2])
    assert Xi.shape == (50, 10, 2)
    assert Xi.min() >= 0 and Xi.max() < golden.n_cells


def test_y_mixing_on_random_gap_patterns():
    chain = two_state_chain(0.3, 0.4)
    rng = np.random.default_rng(11)
    for _ in range(20):
        m = int(rng.integers(2, 4))
        times = np.cumsum(rng.integers(1, 5, size=m))
        tables = [rng.uniform(-1, 1, size=(2, 2)) for _ in range(m)]
        lhs, rhs = y_mixing_check(chain, 2, times, tables)
        assert lhs <= rhs
