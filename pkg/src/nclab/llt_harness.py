"""Characteristic functions, decay checks, conditioning bounds and LCLT/CLT tests.

All Monte Carlo radii are 3σ bands: for a characteristic function the
radius is 3/√M because |e^{itS}| = 1. When the joint law of the summands has
at most 2^20 atoms the exact law is used instead and the table is flagged.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse, stats

from .errors import DegeneracyError, UnsupportedError, ValidationError
from .noncon_engine import (FiniteMeasure, IndexFamily, Observable, exact_sum_law, sample_sums,
                            zeta, zeta_y_table)
from .process_models import FiniteChain


# --------------------------------------------------------------------------
# Characteristic functions
# --------------------------------------------------------------------------


@dataclass
class CharFnTable:
    t_grid: np.ndarray
    phi: np.ndarray
    ci: float
    N: int
    M: int
    exact: bool = False

    @property
    def modulus(self) -> np.ndarray:
        return np.abs(self.phi)

    def rows(self) -> List[Dict]:
        return [{"N": self.N, "t": float(t), "re": float(p.real), "im": float(p.imag),
                 "abs": float(abs(p)), "ci": self.ci, "exact": self.exact}
                for t, p in zip(self.t_grid, self.phi)]


def _charfn_from_samples(S: np.ndarray, t_grid: np.ndarray) -> np.ndarray:
    out = np.empty(t_grid.size, dtype=complex)
    for i, t in enumerate(t_grid):
        x = t * S
        out[i] = complex(np.mean(np.cos(x)), np.mean(np.sin(x)))
    return out


def _exact_feasible(model, q: IndexFamily, N: int, max_atoms: int) -> bool:
    d = np.unique(q.table(N)).size
    if isinstance(model, FiniteChain):
        return model.states ** d <= max_atoms
    return False


def charfn_tables(model, q: IndexFamily, G: Observable, N_grid: Sequence[int], t_grid: Sequence[float],
                  M: int, seed: int, exact: str = "auto", max_atoms: int = 2**20,
                  threads: int = 1) -> List[CharFnTable]:
    """φ_N(t) = E e^{itS_N} for each horizon in ``N_grid`` (shared samples)."""
    t = np.asarray(t_grid, dtype=float)
    N_grid = [int(n) for n in N_grid]
    use_exact = exact == "always" or (exact == "auto" and all(_exact_feasible(model, q, n, max_atoms)
                                                               for n in N_grid))
    if use_exact:
        out = []
        for n in N_grid:
            vals, probs = exact_sum_law(model, q, G, n, max_atoms)
            phi = np.exp(1j * np.outer(t, vals)) @ probs
            phi[t == 0] = 1.0
            out.append(CharFnTable(t, phi, 0.0, n, 0, True))
        return out
    S = sample_sums(model, q, G, N_grid, M, seed, threads=threads)
    ci = 3.0 / math.sqrt(M)
    return [CharFnTable(t, _charfn_from_samples(S[:, i], t), ci, n, M, False) for i, n in enumerate(N_grid)]


def estimate_charfn(model, q: IndexFamily, G: Observable, N: int, t_grid: Sequence[float], M: int,
                    seed: int, exact: str = "auto") -> CharFnTable:
    """Characteristic function of S_N at a single horizon."""
    return charfn_tables(model, q, G, [N], t_grid, M, seed, exact=exact)[0]


def charfn_csv(tables: Sequence[CharFnTable], path: str) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "t", "re", "im", "abs", "ci", "exact"])
        for tab in tables:
            for r in tab.rows():
                wr.writerow([r["N"], repr(r["t"]), repr(r["re"]), repr(r["im"]), repr(r["abs"]),
                             repr(r["ci"]), int(r["exact"])])


# --------------------------------------------------------------------------
# DecRate checks
# --------------------------------------------------------------------------


@dataclass
class DecayFitReport:
    regime: str
    passed: bool
    c0: Optional[float] = None
    d0: Optional[float] = None
    gamma: Optional[float] = None
    b_N: Dict[int, float] = field(default_factory=dict)
    sup_table: Dict[int, float] = field(default_factory=dict)
    window: Tuple[float, float] = (0.0, 0.0)
    diagnostics: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"regime": self.regime, "pass": self.passed, "c0": self.c0, "d0": self.d0, "gamma": self.gamma,
               "b_N": {str(k): v for k, v in self.b_N.items()},
               "sup_table": {str(k): v for k, v in self.sup_table.items()},
               "window": list(self.window), "diagnostics": self.diagnostics}
        return json.dumps(doc, sort_keys=True, default=float)


def check_decrate(tables: Sequence[CharFnTable], regime: str, delta: float = 0.5, h0: float = 1.0,
                  gamma: float = 0.75, zeta_max: Optional[float] = None, t_max: float = 20.0) -> DecayFitReport:
    """Fit and test one of the three decay regimes.

    ``DecRate1``: |φ_N(t)| ≤ c₀e^{−d₀Nt²} + b_N on |t| ≤ δ. c₀ and d₀ come
    from a log-linear fit on the points well above the noise floor, b_N is
    the remaining excess at horizon N and must decay like N^{−γ}, γ > 1/2.

    ``DecRate2``: √N sup_{δ ≤ |t| ≤ t_max}|φ_N| must shrink with N.

    ``DecRate3``: same on the lattice window [−π/h₀, π/h₀]∖(−δ, δ); with
    ``zeta_max`` the stronger bound sup|φ_N| ≤ ζ_max^N + CI is tested.
    """
    if len(tables) < 4:
        raise ValidationError("need at least four horizons")
    if gamma <= 0.5:
        raise ValidationError("gamma must exceed 1/2")
    tabs = sorted(tables, key=lambda tb: tb.N)
    Ns = np.array([tb.N for tb in tabs], dtype=float)
    if regime == "DecRate1":
        xs, ys = [], []
        for tb in tabs:
            sel = np.abs(tb.t_grid) <= delta
            mod = tb.modulus[sel]
            floor = max(10 * tb.ci, 1e-3)
            keep = mod > floor
            xs.append(tb.N * tb.t_grid[sel][keep] ** 2)
            ys.append(np.log(mod[keep]))
        x, y = np.concatenate(xs), np.concatenate(ys)
        if x.size < 2 or np.ptp(x) == 0:
            return DecayFitReport(regime, False, diagnostics={"reason": "not enough points above noise"},
                                  window=(0.0, delta))
        slope, icpt = np.polyfit(x, y, 1)
        d0 = float(-slope)
        # smallest c₀ enveloping the fitted points, so fit residuals do not leak into b_N
        c0 = float(max(math.exp(icpt), 1.0, np.max(np.exp(y + max(d0, 0.0) * x))))
        b_N = {}
        for tb in tabs:
            sel = np.abs(tb.t_grid) <= delta
            bound = c0 * np.exp(-max(d0, 0.0) * tb.N * tb.t_grid[sel] ** 2)
            b_N[tb.N] = float(np.max(np.clip(tb.modulus[sel] - bound - tb.ci, 0.0, None), initial=0.0))
        bs = np.array([b_N[int(n)] for n in Ns])
        root = np.sqrt(Ns) * bs
        # envelope b·N^{-γ} covering every b_N
        b_coef = float(np.max(bs * Ns ** gamma))
        ok = d0 > 1e-9 and bool(np.all(np.diff(root) <= 1e-12))
        diag = {"sqrtN_bN": root.tolist(), "envelope_b": b_coef, "d0_positive": d0 > 1e-9}
        return DecayFitReport(regime, ok, c0=c0, d0=d0, gamma=gamma, b_N=b_N, window=(0.0, delta),
                              diagnostics=diag)
    if regime in ("DecRate2", "DecRate3"):
        hi = math.pi / h0 if regime == "DecRate3" else t_max
        sup, lim = {}, {}
        for tb in tabs:
            sel = (np.abs(tb.t_grid) >= delta) & (np.abs(tb.t_grid) <= hi + 1e-12)
            if not np.any(sel):
                raise ValidationError("t_grid has no points in the window")
            sup[tb.N] = float(tb.modulus[sel].max())
            lim[tb.N] = tb.ci
        root = np.array([math.sqrt(n) * max(sup[int(n)] - lim[int(n)], 0.0) for n in Ns])
        shrink = bool(np.all(np.diff(root) <= 1e-12))
        diag = {"sqrtN_excess": root.tolist()}
        ok = shrink
        if regime == "DecRate3" and zeta_max is not None:
            if not zeta_max < 1:
                ok = False
            env = {int(n): zeta_max ** n for n in Ns}
            under = all(sup[n] <= env[n] + lim[n] + 1e-12 for n in env)
            diag["zeta_max"] = zeta_max
            diag["zeta_envelope"] = {str(k): v for k, v in env.items()}
            ok = ok and under
        return DecayFitReport(regime, ok, sup_table=sup, window=(delta, hi), diagnostics=diag)
    raise ValidationError(f"unknown regime {regime!r}")


# --------------------------------------------------------------------------
# Conditioning bounds
# --------------------------------------------------------------------------


def _product_chain(chain: FiniteChain, k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Transition, stationary law and state tuples of (X^{(1)}_n, ..., X^{(k)}_{kn})."""
    Q = np.ones((1, 1))
    pi = np.ones(1)
    for j in range(1, k + 1):
        Q = np.kron(Q, np.linalg.matrix_power(chain.transition, j))
        pi = np.kron(pi, chain.stationary())
    S = chain.states
    codes = np.arange(S ** k)
    tup = np.stack([(codes // S ** (k - 1 - j)) % S for j in range(k)], axis=1)
    return Q, pi, tup


def y_product_expectation(chain: FiniteChain, G: Observable, mu: FiniteMeasure, k: int, t: float,
                          start: int, stop: int) -> float:
    """E Π_{n=start}^{stop} ζ(Y_n, t), exactly, by a transfer-matrix product."""
    if stop < start:
        return 1.0
    Q, pi, tup = _product_chain(chain, k)
    tab = zeta_y_table(G, mu, k, t)
    idx = tuple(mu.index_of(chain.values[tup[:, j]]) for j in range(k))
    d = tab[idx]
    v = pi * d
    for _ in range(stop - start):
        v = (v @ Q) * d
    return float(v.sum())


@dataclass
class ConditioningTable:
    rows: List[Dict]
    a: float
    delta0: float
    c0: float
    n_ci: float

    @property
    def violations(self) -> List[Dict]:
        return [r for r in self.rows if not r["ok"]]

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_csv(self, path: str) -> None:
        keys = ["seed", "N", "t", "lhs", "ci", "rhs", "bound", "ok"]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(keys)
            for r in self.rows:
                wr.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in keys])


def verify_conditioning(model, q: IndexFamily, G: Observable, N_grid: Sequence[int], t_grid: Sequence[float],
                        M: int, seeds: Sequence[int], mu: Optional[FiniteMeasure] = None,
                        n_ci: float = 3.0, threads: int = 1) -> ConditioningTable:
    """Monte Carlo |φ_N(t)| against the conditioning bounds, with b_N = 0.

    For k = 0 the bound is ζ(t)^{c₀N}, c₀ = 1 − a. For k ≥ 1 it is
    E Π_{n=[aN]+1}^N ζ(Y_n, t), exact for finite chains. A row passes when
    lhs ≤ bound + ``n_ci``·CI with CI = 3/√M.
    """
    N_grid = sorted(int(n) for n in N_grid)
    mu = FiniteMeasure.from_model(model) if mu is None else mu
    lc = q.lemma_constants(N_grid[0], N_grid[-1])
    a = lc["a"]
    c0 = 1.0 - a
    rows = []
    rhs_cache: Dict[Tuple[int, float], float] = {}
    for seed in seeds:
        tabs = charfn_tables(model, q, G, N_grid, t_grid, M, int(seed), threads=threads)
        for tb in tabs:
            N = tb.N
            for t, p in zip(tb.t_grid, tb.phi):
                key = (N, float(t))
                if key not in rhs_cache:
                    if q.k == 0:
                        rhs_cache[key] = float(zeta(G, mu, t)) ** (c0 * N)
                    else:
                        if not isinstance(model, FiniteChain):
                            raise UnsupportedError("exact Y-product bound needs a finite chain")
                        rhs_cache[key] = y_product_expectation(model, G, mu, q.k, float(t),
                                                               int(math.floor(a * N)) + 1, N)
                rhs = rhs_cache[key]
                lhs = float(abs(p))
                rows.append({"seed": int(seed), "N": N, "t": float(t), "lhs": lhs, "ci": tb.ci,
                             "rhs": rhs, "bound": "zeta_power" if q.k == 0 else "y_product",
                             "ok": lhs <= rhs + n_ci * tb.ci + 1e-12})
    return ConditioningTable(rows, a, lc["delta0"], c0, n_ci)


def independent_summand_check(G: Observable, mu: FiniteMeasure, N: int, t_grid: Sequence[float]) -> Dict:
    """|E e^{itG}|^N against ζ(t)^N for iid, fully separated summands (exact)."""
    T = G.table(mu)
    w = np.ones(())
    for _ in range(G.ell):
        w = np.multiply.outer(w, mu.weights)
    t = np.asarray(t_grid, dtype=float)
    single = np.array([abs(np.sum(w * np.exp(1j * s * T))) for s in t])
    lhs = single ** N
    rhs = np.asarray(zeta(G, mu, t)) ** N
    return {"t": t, "lhs": lhs, "rhs": rhs, "ok": bool(np.all(lhs <= rhs + 1e-14))}


# --------------------------------------------------------------------------
# Dependency graphs
# --------------------------------------------------------------------------


@dataclass
class DependencyGraph:
    N: int
    r: int
    adjacency: sparse.csr_matrix
    ball1: np.ndarray
    ball3: np.ndarray
    A0: float
    A1: float

    @property
    def A0_fit(self) -> float:
        return float(self.ball1.max() / max(self.r, 1))

    @property
    def bounds_hold(self) -> bool:
        s = max(self.r, 1)
        return bool(self.ball1.max() <= self.A0 * s and self.ball3.max() <= self.A1 * s ** 3)

    def summary(self) -> Dict:
        return {"N": self.N, "r": self.r, "max_ball1": int(self.ball1.max()), "max_ball3": int(self.ball3.max()),
                "A0": self.A0, "A1": self.A1, "A0_fit": self.A0_fit, "bounds_hold": self.bounds_hold}


def build_dependency_graph(q: IndexFamily, N: int, r: int) -> DependencyGraph:
    """Graph on 1..N joining n, m when min_{i,j}|q_i(n) − q_j(m)| ≤ r.

    Built by a sorted sweep over all index values. The ball bounds use
    A₀ = 3ℓ² + 1 (each of the ℓ² coordinate pairs meets at most 2r + 1
    indices of a strictly increasing sequence) and A₁ = A₀³.
    """
    if N < 1 or r < 0:
        raise ValidationError("need N >= 1 and r >= 0")
    tab = q.table(N)
    ell = q.ell
    vals = tab.ravel()
    owner = np.tile(np.arange(N), ell)
    order = np.argsort(vals, kind="stable")
    sv, so = vals[order], owner[order]
    rows, cols = [], []
    lo = np.searchsorted(sv, sv - r, side="left")
    hi = np.searchsorted(sv, sv + r, side="right")
    for p in range(sv.size):
        rows.append(np.full(hi[p] - lo[p], so[p]))
        cols.append(so[lo[p]:hi[p]])
    rr = np.concatenate(rows)
    cc = np.concatenate(cols)
    A = sparse.csr_matrix((np.ones(rr.size, dtype=np.int8), (rr, cc)), shape=(N, N))
    A = (A + A.T + sparse.identity(N, dtype=np.int8, format="csr")).astype(bool).astype(np.int64)
    ball1 = np.asarray(A.sum(axis=1)).ravel()
    A3 = (A @ A).astype(bool).astype(np.int64)
    A3 = (A3 @ A).astype(bool)
    ball3 = np.asarray(A3.sum(axis=1)).ravel()
    A0 = 3.0 * ell ** 2 + 1.0
    return DependencyGraph(N, r, A.astype(bool).tocsr(), ball1, ball3, A0, A0 ** 3)


def dependency_graph_bruteforce(q: IndexFamily, N: int, r: int) -> np.ndarray:
    """Boolean adjacency (with the diagonal) from the full O(N²) ρ-table."""
    tab = q.table(N)
    rho = np.full((N, N), np.iinfo(np.int64).max)
    for i in range(q.ell):
        for j in range(q.ell):
            rho = np.minimum(rho, np.abs(tab[i][:, None] - tab[j][None, :]))
    adj = rho <= r
    np.fill_diagonal(adj, True)
    return adj


# --------------------------------------------------------------------------
# LCLT and CLT
# --------------------------------------------------------------------------


def _window(kind: str, width: float):
    if kind == "box":
        return lambda x: (np.abs(x) <= width / 2) / width
    if kind == "triangle":
        return lambda x: np.clip(1.0 - np.abs(x) / width, 0.0, None) / width
    raise ValidationError(f"unknown window {kind!r}")


@dataclass
class LCLTTable:
    rows: List[Dict]
    mode: str

    @property
    def sup_errors(self) -> Dict[int, float]:
        return {r["N"]: r["sup_error"] for r in self.rows}

    @property
    def decreasing(self) -> bool:
        errs = [r["sup_error"] for r in sorted(self.rows, key=lambda r: r["N"])]
        return errs[-1] < errs[0]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["N", "sup_error", "noise", "n_u", "mode"])
            for r in self.rows:
                wr.writerow([r["N"], repr(r["sup_error"]), repr(r["noise"]), r["n_u"], self.mode])


def lclt_display(S: np.ndarray, N: int, D2: float, g_bar: float, u: np.ndarray, mode: str = "lattice",
                 width: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Per-u value of the LCLT display and its 1σ Monte Carlo noise."""
    D = math.sqrt(D2)
    scale = math.sqrt(2 * math.pi * N) * D
    gauss = np.exp(-(u - g_bar * N) ** 2 / (2 * N * D2))
    M = S.size
    if mode == "lattice":
        vals, counts = np.unique(np.round(S).astype(np.int64), return_counts=True)
        lookup = dict(zip(vals.tolist(), counts.tolist()))
        p = np.array([lookup.get(int(x), 0) for x in u], dtype=float) / M
        noise = scale * np.sqrt(p * (1 - p) / M)
        return scale * p - gauss, noise
    g = _window(mode, width)
    Ss = np.sort(S)
    est = np.empty(u.size)
    noise = np.empty(u.size)
    for i, x in enumerate(u):
        if mode == "box":
            lo = np.searchsorted(Ss, x - width / 2, side="left")
            hi = np.searchsorted(Ss, x + width / 2, side="right")
            vals = np.full(hi - lo, 1.0 / width)
        else:
            lo = np.searchsorted(Ss, x - width, side="left")
            hi = np.searchsorted(Ss, x + width, side="right")
            vals = g(Ss[lo:hi] - x)
        m1 = vals.sum() / M
        m2 = (vals ** 2).sum() / M
        est[i] = m1
        noise[i] = scale * math.sqrt(max(m2 - m1 ** 2, 0.0) / M)
    return scale * est - gauss, noise


def lclt_test(model, q: IndexFamily, G: Observable, N_grid: Sequence[int], D2: float, g_bar: float,
              M: int, seed: int, mode: str = "lattice", width: float = 1.0, u_span: float = 4.0,
              samples: Optional[np.ndarray] = None, threads: int = 1) -> LCLTTable:
    """Sup over u of the LCLT display for each horizon.

    Lattice mode uses point masses P(S_N = u) at integers u; the other modes
    smooth with a unit-integral box or triangle kernel of the given width.
    u ranges over ḠN ± ``u_span``·√(ND²).
    """
    if not D2 > 1e-12:
        raise DegeneracyError("D^2 is (numerically) zero; the local limit statement is void")
    N_grid = [int(n) for n in N_grid]
    S = sample_sums(model, q, G, N_grid, M, seed, threads=threads) if samples is None else samples
    rows = []
    for i, N in enumerate(N_grid):
        sd = math.sqrt(N * D2)
        c = g_bar * N
        if mode == "lattice":
            u = np.arange(math.floor(c - u_span * sd), math.ceil(c + u_span * sd) + 1, dtype=float)
        else:
            u = np.linspace(c - u_span * sd, c + u_span * sd, 201)
        err, noise = lclt_display(S[:, i], N, D2, g_bar, u, mode, width)
        j = int(np.argmax(np.abs(err)))
        rows.append({"N": N, "sup_error": float(np.abs(err).max()), "noise": float(noise[j]),
                     "argmax_u": float(u[j]), "n_u": int(u.size)})
    return LCLTTable(rows, mode)


def iid_lattice_control(values: Sequence[int], probs: Sequence[float], N: int) -> Dict:
    """Exact LCLT sup-error for an iid integer sum and its Edgeworth prediction.

    The exact law is the N-fold convolution (computed through the FFT of the
    single-step law); the first-order Edgeworth term is
    e^{−x²/2} κ₃/(6σ³√N) (x³ − 3x), x = (u − Nm)/(σ√N).
    """
    v = np.asarray(values, dtype=np.int64)
    p = np.asarray(probs, dtype=float)
    if v.min() < 0:
        shift = int(v.min())
    else:
        shift = 0
    base = np.zeros(int(v.max() - shift) + 1)
    np.add.at(base, v - shift, p)
    size = N * (base.size - 1) + 1
    L = 1 << int(math.ceil(math.log2(size)))
    f = np.fft.rfft(base, L)
    law = np.fft.irfft(f ** N, L)[:size]
    law = np.clip(law, 0.0, None)
    support = np.arange(size) + N * shift
    m = float(np.dot(p, v))
    var = float(np.dot(p, (v - m) ** 2))
    k3 = float(np.dot(p, (v - m) ** 3))
    sd = math.sqrt(N * var)
    x = (support - N * m) / sd
    gauss = np.exp(-x ** 2 / 2)
    err = math.sqrt(2 * math.pi * N * var) * law - gauss
    edge = gauss * k3 / (6 * var ** 1.5 * math.sqrt(N)) * (x ** 3 - 3 * x)
    return {"N": N, "sup_error": float(np.abs(err).max()), "edgeworth_sup": float(np.abs(edge).max()),
            "residual_sup": float(np.abs(err - edge).max()), "bound": 0.5 / math.sqrt(N)}


@dataclass
class CLTTable:
    rows: List[Dict]

    @property
    def decreasing(self) -> bool:
        ks = [r["ks"] for r in sorted(self.rows, key=lambda r: r["N"])]
        return all(b < a for a, b in zip(ks, ks[1:]))


def clt_test(model, q: IndexFamily, G: Observable, N_grid: Sequence[int], D2: float, g_bar: float,
             M: int, seed: int, samples: Optional[np.ndarray] = None, threads: int = 1) -> CLTTable:
    """KS distance of N^{-1/2}(S_N − ḠN) from 𝒩(0, D²) for each horizon."""
    if not D2 > 1e-12:
        raise DegeneracyError("D^2 is (numerically) zero; the CLT is degenerate")
    N_grid = [int(n) for n in N_grid]
    S = sample_sums(model, q, G, N_grid, M, seed, threads=threads) if samples is None else samples
    rows = []
    for i, N in enumerate(N_grid):
        z = (S[:, i] - g_bar * N) / math.sqrt(N)
        res = stats.kstest(z, stats.norm(scale=math.sqrt(D2)).cdf)
        rows.append({"N": N, "ks": float(res.statistic), "M": int(S.shape[0]),
                     "band": 1.63 / math.sqrt(S.shape[0]) + 0.9 / math.sqrt(N)})
    return CLTTable(rows)
