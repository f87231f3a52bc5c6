import numpy as np
import pytest
from hypothesis import given, strategies as st

from nclab.errors import ValidationError
from nclab.tower_core import build_tower, fixed_point, golden_spec, tower_map
from nclab.transfer_ops import (LasotaYorke, TowerObservable, apply, classify_periodic, exact_variance,
                                golden_observable, normalized, p_twisted, periodic_observable,
                                periodic_operator, pressure, random_battery, rpf_iterate,
                                sample_environment, sample_orbit_cells, spectral_radius,
                                training_battery, transfer, twisted, verify_lasota_yorke, weighted,
                                weighted_norms)


def _hand_built_P(tw):
    """P from F-preimages of depth-(D+1) subcylinders, weighted by m0."""
    M = np.zeros((tw.n_cells, tw.n_cells))
    for c in range(tw.n_cells):
        for s in range(tw.J):
            y = float(tw.psi(s, 0.5))
            for j in reversed(tw.digits[c]):
                y = float(tw.psi(int(j), y))
            fx, fk = tower_map(tw, y, int(tw.floor[c]))
            d = int(tw.locate(fx, fk)[0])
            M[d, c] += tw.m0[c] * tw.w[s]
    return M / tw.m0[:, None]


def test_transfer_matches_hand_built_matrix(small_golden):
    np.testing.assert_allclose(transfer(small_golden).dense(), _hand_built_P(small_golden), atol=1e-13)


def test_floor_one_indicator_moves_to_base(golden):
    g = golden.floor_indicator(1)
    Pg = apply(transfer(golden), g)
    # every base point has exactly one preimage on floor 1, with Jacobian weight 1/3
    np.testing.assert_allclose(Pg, golden.floor_indicator(0) / 3.0, atol=1e-15)


def test_conservation_random_functions(golden, rng):
    g = rng.standard_normal((golden.n_cells, 100))
    Pg = apply(transfer(golden), g)
    err = np.abs(golden.integral(Pg) - golden.integral(g))
    assert err.max() <= 1e-12


def test_normalized_fixes_constants(golden):
    one = np.ones(golden.n_cells)
    assert np.max(np.abs(apply(normalized(golden), one) - 1)) <= 1e-10


def test_weighted_fixed_point_and_dual(golden):
    L = weighted(golden)
    assert np.max(np.abs(L.apply(golden.h) - golden.h)) <= 1e-10
    assert np.max(np.abs(L.base.T @ golden.m - golden.m)) <= 1e-10


def test_dimension_mismatch(golden):
    with pytest.raises(ValidationError):
        apply(transfer(golden), np.ones(3))


def test_twisted_at_zero_is_power(small_golden):
    tw = small_golden
    G = golden_observable(tw)
    A = normalized(tw).dense()
    R = twisted(tw, 0.0, (0,), G).dense()
    assert np.max(np.abs(R - A @ A)) <= 1e-12


@given(st.floats(-10, 10), st.integers(0, 23), st.integers(0, 1000))
def test_twisted_modulus_bound(t, cell, seed):
    tw = build_tower(golden_spec(4))
    G = golden_observable(tw)
    R = twisted(tw, t, (cell,), G)
    A = normalized(tw)
    g = np.random.default_rng(seed).standard_normal(tw.n_cells) * (1 + 1j)
    lhs = np.abs(R.apply(g))
    rhs = A.apply(A.apply(np.abs(g)))
    assert np.all(lhs <= rhs + 1e-12)
    assert np.all(np.abs(R.apply(np.ones(tw.n_cells))) <= 1 + 1e-12)


def test_constant_observable_twist_is_trivial(small_golden):
    tw = small_golden
    G = TowerObservable(2, lambda x, y: np.full(np.broadcast(x, y).shape, 3.0), integer_valued=True)
    R = twisted(tw, 1.7, (5,), G)
    A = normalized(tw).dense()
    assert np.max(np.abs(R.dense() - A @ A)) <= 1e-12


def test_weighted_norms_of_weight(golden):
    s, h, W = weighted_norms(golden, golden.v)
    assert s == pytest.approx(1.0, abs=1e-15) and h == 0.0 and W == pytest.approx(1.0)


def test_weighted_norms_single_floor(tall):
    for k in (0, 3, 12):
        s, _, _ = weighted_norms(tall, tall.floor_indicator(k))
        assert s == pytest.approx(np.exp(-k * tall.p / 2), rel=1e-14)


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_weighted_norm_homogeneity(seed, lam):
    tw = build_tower(golden_spec(4))
    g = np.random.default_rng(seed).standard_normal(tw.n_cells)
    W1 = weighted_norms(tw, g)[2]
    W2 = weighted_norms(tw, lam * g)[2]
    assert W2 == pytest.approx(lam * W1, rel=1e-13)
    assert weighted_norms(tw, 2 * g)[2] == 2 * W1


def _ly_setup(tall):
    A = (tall.floor == 0) & (tall.branch == 0)
    G = TowerObservable(2, lambda x, y: A[x] * A[y] + 0.5 * (tall.floor[y] >= 1))
    env = sample_environment(tall, 2, 12, 3)
    return G, env


def test_ly_constant_g_has_zero_lip(tall):
    G, env = _ly_setup(tall)
    g = np.ones(tall.n_cells)
    for k in (0, 5, 12):
        rep = verify_lasota_yorke(tall, G, env, 0.0, 6, k, g)
        assert rep.ok
        lip_key = "LY1.2" if rep.case == "N<=k" else "LY2.2"
        assert np.all(rep.lhs[lip_key] <= 1e-12)


def test_ly_pullback_above_floor_zero(tall, rng):
    G, env = _ly_setup(tall)
    g = rng.standard_normal(tall.n_cells) + 1j * rng.standard_normal(tall.n_cells)
    N, k = 3, 9
    rep = verify_lasota_yorke(tall, G, env, 1.0, N, k, g)
    assert rep.case == "N<=k" and rep.ok
    cells = tall.floor_cells[k]
    pulled = tall.index[k - 2 * N, tall.word[cells]]
    assert rep.lhs["LY1.1"][0] == pytest.approx(np.abs(g[pulled]).max(), rel=1e-12)


def test_ly_fresh_battery_passes(tall):
    G, env = _ly_setup(tall)
    ly = LasotaYorke(tall, G, env)
    const = ly.fit([1.0], training_battery(tall, 40, seed=1), 6)
    fresh = random_battery(tall, 60, seed=77)
    reps = [r for r in ly.verify(1.0, fresh, 6, const) if r.N == 6 and r.k == 3]
    assert len(reps) == 1 and reps[0].ok
    assert all(v >= 0 for v in reps[0].slack().values())


def test_ly_missing_constants(tall):
    G, env = _ly_setup(tall)
    with pytest.raises(ValidationError):
        verify_lasota_yorke(tall, G, env, 0.5, 2, 0, np.ones(tall.n_cells), auto_fit=False)


@pytest.fixture(scope="module")
def rpf_env(golden6):
    G = golden_observable(golden6)
    env = sample_environment(golden6, 2, 200, 1)
    return [G.centered_last(golden6, a) for a in env]


def test_rpf_at_zero(golden6, rpf_env):
    tr = rpf_iterate(golden6, 0.0, rpf_env, 2, 32)
    assert np.max(np.abs(tr.lam - 1)) <= 1e-10
    h_ref = golden6.h0 / golden6.v
    assert np.max(np.abs(tr.h - h_ref)) <= 1e-10
    assert abs(np.dot(tr.nu, tr.h) - 1) <= 1e-12
    assert 0 < tr.delta < 1


def test_rpf_normalization_and_residual(golden6, rpf_env):
    tr = rpf_iterate(golden6, 0.05 + 0.02j, rpf_env, 2, 16)
    assert abs(np.dot(tr.nu, tr.h) - 1) <= 1e-10
    assert tr.residual <= 1e-10


def test_pressure_derivative_vanishes(golden6, rpf_env):
    for n in (8, 16, 32):
        d1 = (pressure(golden6, 1e-4, rpf_env, 2, n) - pressure(golden6, -1e-4, rpf_env, 2, n)) / 2e-4
        assert abs(d1) <= 1e-6 * n


def test_pressure_curvature_matches_exact_variance(golden6, rpf_env):
    e = 1e-3
    for n in (8, 16):
        p = [pressure(golden6, z, rpf_env, 2, n) for z in (-e, 0.0, e)]
        d2 = ((p[0] - 2 * p[1] + p[2]) / e ** 2).real
        _, var = exact_variance(golden6, rpf_env[40:40 + n], 2)
        assert abs(d2 - var) <= 0.05


def test_rpf_decay_stable_under_refinement():
    deltas = []
    for d in (6, 7):
        tw = build_tower(golden_spec(d))
        G = golden_observable(tw)
        us = [G.centered_last(tw, a) for a in sample_environment(tw, 2, 200, 1)]
        deltas.append(rpf_iterate(tw, 0.0, us, 2, 32).delta)
    assert abs(deltas[1] / deltas[0] - 1) <= 0.2


def test_rpf_short_environment(golden6, rpf_env):
    with pytest.raises(ValidationError):
        rpf_iterate(golden6, 0.0, rpf_env[:50], 2, 32)


def test_spectral_radius_untwisted(golden, golden_G):
    x0 = (fixed_point(golden, [0]), 0)
    rep = spectral_radius(periodic_operator(golden, golden_G, x0, 1, 0.0))
    assert abs(rep["radius"] - 1) <= 1e-8


def test_spectral_radius_lattice_frequency(golden, golden_G):
    x0 = (fixed_point(golden, [0]), 0)
    rep = spectral_radius(periodic_operator(golden, golden_G, x0, 1, np.pi))
    assert rep["radius"] < 1 - 1e-3


def test_degenerate_observable_keeps_unit_radius(small_golden):
    tw = small_golden
    G = TowerObservable(2, lambda x, y: tw.floor[x] + 0.0 * y, integer_valued=True)
    x0 = (fixed_point(tw, [0]), 0)
    for t in (0.5, 2.0, np.pi):
        assert abs(spectral_radius(periodic_operator(tw, G, x0, 1, t))["radius"] - 1) <= 1e-8


def test_periodic_observable_single_slot(small_golden):
    tw = small_golden
    phi = np.sin(np.arange(tw.n_cells))
    G = TowerObservable(2, lambda x, y: phi[y] + 0.0 * x)
    x0 = (fixed_point(tw, [0]), 0)
    np.testing.assert_allclose(periodic_observable(tw, G, x0, 1), phi)


def test_periodic_observable_constant(small_golden):
    tw = small_golden
    G = TowerObservable(2, lambda x, y: np.full(np.broadcast(x, y).shape, 2.5))
    x0 = (fixed_point(tw, [0, 1]), 0)
    assert x0[0] == pytest.approx(4 / 7)
    np.testing.assert_allclose(periodic_observable(tw, G, x0, 3), 7.5)
    with pytest.raises(ValidationError):
        periodic_observable(tw, G, x0, 2)


def test_classify_indicator_product_is_lattice(small_golden):
    tw = small_golden
    G = golden_observable(tw)
    res = classify_periodic(tw, G, (fixed_point(tw, [0]), 0), 1, n_t=8)
    assert res["verdict"] == "lattice" and res["radius"][-1] < 1 - 1e-3


def test_orbit_sampler_follows_the_map(golden):
    cells = sample_orbit_cells(golden, 20, 2000, np.random.default_rng(3))
    P = transfer(golden).base.tocsc()
    for s in range(20):
        a, b = cells[:, s], cells[:, s + 1]
        assert np.all(np.asarray(P[b, a]).ravel() > 0)
    freq = np.bincount(cells[:, 7], minlength=golden.n_cells) / cells.shape[0]
    f0 = np.bincount(golden.floor[cells[:, 7]], minlength=2) / cells.shape[0]
    np.testing.assert_allclose(f0, [0.75, 0.25], atol=0.04)
    assert freq.sum() == pytest.approx(1.0)


def test_p_twisted_step(golden6):
    G = golden_observable(golden6)
    op = p_twisted(golden6, 0.3, (0,), G)
    assert op.step == 2 and op.n == golden6.n_cells
