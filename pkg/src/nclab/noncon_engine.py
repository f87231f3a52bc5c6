"""Nonconventional sums, index families and the ζ machinery.

A nonconventional sum couples a stationary process at several index
sequences at once,

    S_N = Σ_{n=1}^N G(X_{q_1(n)}, ..., X_{q_ℓ(n)}).

Everything here works on a *finite measure* μ (atoms plus weights) for the
exact parts and on Monte Carlo samples drawn through ``model.sample_at`` for
the rest. Index sequences are 1-based in ``n`` and the coordinate index ``j``
of the public API is 1-based as well.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from .errors import DegeneracyError, UnsupportedError, ValidationError
from .process_models import BernoulliFunctional, CoupledTrajectory, FiniteChain, phi_exact


# --------------------------------------------------------------------------
# Finite measures
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteMeasure:
    """Probability measure on finitely many real atoms."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.array(self.atoms, dtype=float)
        w = np.array(self.weights, dtype=float)
        if a.ndim != 1 or a.shape != w.shape or a.size == 0:
            raise ValidationError("atoms and weights must be matching non-empty vectors")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValidationError("weights must be a probability vector")
        order = np.argsort(a, kind="stable")
        a, w = a[order], w[order]
        if a.size > 1 and np.any(np.diff(a) == 0):
            raise ValidationError("atoms must be distinct")
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.atoms.size

    def index_of(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pos = np.searchsorted(self.atoms, x)
        pos = np.clip(pos, 0, self.size - 1)
        if np.any(self.atoms[pos] != x):
            raise ValidationError("value is not an atom of the measure")
        return pos

    @classmethod
    def from_model(cls, model) -> "FiniteMeasure":
        atoms, wts = model.stationary_law()
        uniq, inv = np.unique(np.asarray(atoms, dtype=float), return_inverse=True)
        return cls(uniq, np.bincount(inv, weights=wts, minlength=uniq.size))

    @classmethod
    def empirical(cls, samples) -> "FiniteMeasure":
        s = np.asarray(samples, dtype=float).ravel()
        uniq, counts = np.unique(s, return_counts=True)
        return cls(uniq, counts / counts.sum())


def marginal_measure(model) -> FiniteMeasure:
    """Exact single-coordinate law when available, else empirical from 2·10^5 draws."""
    try:
        return FiniteMeasure.from_model(model)
    except ValidationError:
        rng = np.random.default_rng(0)
        return FiniteMeasure.empirical(model.sample_at(np.array([1]), 200_000, rng))


# --------------------------------------------------------------------------
# Index families
# --------------------------------------------------------------------------


def _poly(coeffs: Sequence[int]) -> Callable[[np.ndarray], np.ndarray]:
    c = [int(v) for v in coeffs]

    def q(n):
        n = np.asarray(n, dtype=np.int64)
        out = np.zeros_like(n)
        for v in reversed(c):
            out = out * n + v
        return out

    return q


@dataclass(frozen=True, eq=False)
class IndexFamily:
    """Index sequences q_1, ..., q_ℓ with the first ``k`` linear (q_j(n) = jn).

    ``q`` holds callables mapping an integer array ``n`` to indices.
    ``coeffs`` keeps polynomial coefficients (ascending powers) when known.
    """

    q: Tuple[Callable[[np.ndarray], np.ndarray], ...]
    k: int = 0
    alpha: float = 0.5
    coeffs: Optional[Tuple[Tuple[int, ...], ...]] = None
    n_limit: Optional[int] = None

    def __post_init__(self):
        if len(self.q) < 1:
            raise ValidationError("need at least one index sequence")
        if not 0 <= self.k < len(self.q):
            raise ValidationError("k must satisfy 0 <= k < ell")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        n = np.arange(1, min(64, self.n_limit or 64) + 1)
        for j in range(1, self.k + 1):
            if not np.array_equal(self.index(j, n), j * n):
                raise ValidationError(f"q_{j} must equal {j}n for j <= k")
        for j in range(1, self.ell + 1):
            if np.any(self.index(j, n) < 0):
                raise ValidationError("index sequences must be non-negative")

    @property
    def ell(self) -> int:
        return len(self.q)

    def index(self, j: int, n) -> np.ndarray:
        return np.asarray(self.q[j - 1](np.asarray(n, dtype=np.int64)), dtype=np.int64)

    def table(self, N: int) -> np.ndarray:
        """Array of shape (ℓ, N) with q_j(n) for n = 1..N."""
        n = np.arange(1, N + 1)
        return np.vstack([self.index(j, n) for j in range(1, self.ell + 1)])

    @classmethod
    def polynomial(cls, coeffs: Sequence[Sequence[int]], k: Optional[int] = None,
                   alpha: float = 0.5) -> "IndexFamily":
        """Family from integer coefficient lists in ascending powers.

        ``k`` defaults to the number of leading sequences equal to jn.
        """
        cs = tuple(tuple(int(v) for v in c) for c in coeffs)
        if k is None:
            k = 0
            for j, c in enumerate(cs, start=1):
                if tuple(np.trim_zeros(np.array(c), "b")) == (0, j) and k == j - 1:
                    k = j
                else:
                    break
            k = min(k, len(cs) - 1)
        return cls(q=tuple(_poly(c) for c in cs), k=k, alpha=alpha, coeffs=cs)

    @classmethod
    def tabulated(cls, tables: Sequence[Sequence[int]], k: int = 0, alpha: float = 0.5) -> "IndexFamily":
        """Family from explicit tables; ``tables[j][n-1]`` is q_{j+1}(n)."""
        arrs = [np.asarray(t, dtype=np.int64) for t in tables]

        def make(arr):
            def q(n):
                n = np.asarray(n, dtype=np.int64)
                if np.any(n < 1) or np.any(n > arr.size):
                    raise ValidationError("tabulated index family is too short")
                return arr[n - 1]
            return q

        return cls(q=tuple(make(a) for a in arrs), k=k, alpha=alpha, n_limit=min(a.size for a in arrs))

    def to_json(self) -> Dict:
        return {"coeffs": [list(c) for c in self.coeffs] if self.coeffs else None,
                "k": self.k, "alpha": self.alpha, "ell": self.ell}

    # conditions on the simulated range -----------------------------------

    def check_growth(self, n_max: int) -> Dict[int, Dict]:
        """Gap condition q_j(n+1) − q_j(n) ≥ n^α for j > k on 1..n_max.

        Reports the first n from which the gap holds through ``n_max``.
        """
        n = np.arange(1, n_max)
        out = {}
        for j in range(self.k + 1, self.ell + 1):
            gap = self.index(j, n + 1) - self.index(j, n)
            ok = gap >= n.astype(float) ** self.alpha
            bad = np.flatnonzero(~ok)
            n0 = 1 if bad.size == 0 else int(n[bad[-1]] + 1)
            holds = n0 <= n_max // 2
            out[j] = {"n0": n0, "status": "range-verified" if holds else "failed"}
        return out

    def check_separation(self, n_max: int, eps: Sequence[float] = (0.5, 0.25, 0.1)) -> Dict[Tuple[int, float], Dict]:
        """Separation q_{i+1}(εn) − q_i(n) → ∞ for k < i < ℓ, read off the range.

        Passes when the difference is positive at the end of the range and
        exceeds every value in the first half of the window.
        """
        out = {}
        n = np.arange(max(2, n_max // 2), n_max + 1)
        for i in range(self.k + 1, self.ell):
            for e in eps:
                m = np.maximum(np.floor(e * n).astype(np.int64), 1)
                d = self.index(i + 1, m) - self.index(i, n)
                grows = d[-1] > d[: d.size // 2].max()
                out[(i, float(e))] = {"end_value": int(d[-1]),
                                      "status": "range-verified" if grows and d[-1] > 0 else "failed"}
        return out

    def lemma_constants_hold(self, a: float, delta0: float, N_lo: int, N_hi: int) -> bool:
        N = np.arange(max(N_lo, 1), N_hi + 1)
        M = np.floor(a * N).astype(np.int64)
        if np.any(M < 1):
            return False
        for i in range(1, self.ell):
            if np.any(self.index(i, N) + delta0 * N > self.index(i + 1, M) - delta0 * N):
                return False
        return True

    def lemma_constants(self, N_lo: int, N_hi: int, a_grid: Optional[Sequence[float]] = None,
                        delta_grid: Optional[Sequence[float]] = None) -> Dict:
        """Constants (a, δ₀) with q_i(N) + δ₀N ≤ q_{i+1}([aN]) − δ₀N on [N_lo, N_hi].

        For k > 1 the defaults a = 1 − 1/(4k), δ₀ = 1/6 are tried first.
        Otherwise the grid search maximizes δ₀ and, among ties, takes the
        smallest a (the strongest conditioning claim).
        """
        if self.k > 1:
            a0 = 1.0 - 1.0 / (4 * self.k)
            if self.lemma_constants_hold(a0, 1.0 / 6.0, N_lo, N_hi):
                return {"a": a0, "delta0": 1.0 / 6.0, "source": "default", "status": "range-verified"}
        a_grid = np.round(np.arange(0.05, 0.951, 0.05), 10) if a_grid is None else np.asarray(a_grid)
        d_grid = np.round(np.arange(0.5, 0.0, -0.01), 10) if delta_grid is None else np.sort(delta_grid)[::-1]
        for d in d_grid:
            for a in np.sort(a_grid):
                if self.lemma_constants_hold(float(a), float(d), N_lo, N_hi):
                    return {"a": float(a), "delta0": float(d), "source": "grid", "status": "range-verified"}
        raise ValidationError("no (a, delta0) on the grid satisfies the separation inequality")

    def max_index(self, N: int) -> int:
        return int(self.table(N).max())


# --------------------------------------------------------------------------
# Observables
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Observable:
    """G on 𝒳^ℓ, vectorized over broadcastable coordinate arrays."""

    func: Callable[..., np.ndarray]
    ell: int
    integer_valued: bool = False
    holder: Tuple[float, float] = (1.0, 1.0)
    bound: float = math.inf
    name: str = "G"

    def __call__(self, *xs) -> np.ndarray:
        if len(xs) != self.ell:
            raise ValidationError(f"{self.name} takes {self.ell} coordinates")
        return np.asarray(self.func(*xs), dtype=float) * np.ones(np.broadcast(*xs).shape)

    def table(self, mu: FiniteMeasure) -> np.ndarray:
        grids = np.meshgrid(*([mu.atoms] * self.ell), indexing="ij")
        return self(*grids)

    def check_bound(self, samples: np.ndarray) -> bool:
        vals = self(*[samples[..., j] for j in range(self.ell)])
        return bool(np.all(np.abs(vals) <= self.bound + 1e-12))

    def check_holder(self, xs: np.ndarray, ys: np.ndarray) -> bool:
        """|G(x) − G(y)| ≤ K Σ |x_i − y_i|^κ on rows of ``xs`` and ``ys``."""
        K, kappa = self.holder
        gx = self(*[xs[:, j] for j in range(self.ell)])
        gy = self(*[ys[:, j] for j in range(self.ell)])
        rhs = K * np.sum(np.abs(xs - ys) ** kappa, axis=1)
        return bool(np.all(np.abs(gx - gy) <= rhs + 1e-12))


def constant_observable(c: float, ell: int) -> Observable:
    c = float(c)
    return Observable(lambda *xs: np.full(np.broadcast(*xs).shape, c), ell,
                      integer_valued=float(c).is_integer(), holder=(0.0, 1.0), bound=abs(c), name="const")


def product_indicator(alpha: float, ell: int) -> Observable:
    """G = 1_α(x_1)···1_α(x_ℓ) for an atom α."""

    def f(*xs):
        out = np.ones(np.broadcast(*xs).shape)
        for x in xs:
            out = out * (np.asarray(x) == alpha)
        return out

    return Observable(f, ell, integer_valued=True, holder=(1.0, 0.0), bound=1.0, name="indicator")


def product_observable(ell: int) -> Observable:
    """G = x_1···x_ℓ; integer-valued on integer atoms."""

    def f(*xs):
        out = np.ones(np.broadcast(*xs).shape)
        for x in xs:
            out = out * np.asarray(x, dtype=float)
        return out

    return Observable(f, ell, integer_valued=True, name="product")


def observable_from_config(spec: Dict) -> Observable:
    kind = spec.get("kind")
    ell = int(spec.get("ell", 2))
    if kind == "product":
        return product_observable(ell)
    if kind == "indicator":
        return product_indicator(float(spec.get("alpha", 1.0)), ell)
    if kind == "constant":
        return constant_observable(float(spec.get("c", 1.0)), ell)
    if kind == "linear":
        coef = np.asarray(spec["coeffs"], dtype=float)
        if coef.size != ell:
            raise ValidationError("linear observable needs ell coefficients")
        ints = bool(np.all(coef == np.round(coef)))
        return Observable(lambda *xs: sum(c * np.asarray(x, dtype=float) for c, x in zip(coef, xs)), ell,
                          integer_valued=ints, holder=(float(np.abs(coef).max()), 1.0), name="linear")
    raise ValidationError(f"unknown observable kind {kind!r}")


# --------------------------------------------------------------------------
# Nonconventional sums
# --------------------------------------------------------------------------


def noncon_sum(traj, q: IndexFamily, G: Observable, N: int, r: Optional[int] = None,
               offset: Optional[int] = None) -> float:
    """S_N (or the approximant sum S_{N,r}) along one trajectory.

    ``traj`` is a value array whose first entry sits at time ``offset``
    (default 0), or a :class:`CoupledTrajectory` whose primary path starts at
    time 1. With ``r`` set, the approximants X_{n,r} are used.
    """
    if G.ell != q.ell:
        raise ValidationError("observable and index family disagree on ell")
    if isinstance(traj, CoupledTrajectory):
        path = traj.primary if r is None else traj.approximants.get(int(r))
        if path is None:
            raise ValidationError(f"no approximant for r={r}")
        offset = 1 if offset is None else offset
    else:
        if r is not None:
            raise ValidationError("approximant sums need a CoupledTrajectory")
        path = np.asarray(traj, dtype=float)
        offset = 0 if offset is None else offset
    if N < 0:
        raise ValidationError("N must be >= 0")
    if N == 0:
        return 0.0
    pos = q.table(N) - offset
    if pos.min() < 0 or pos.max() >= len(path):
        raise ValidationError(f"trajectory too short: need times up to {int(pos.max()) + offset}")
    vals = G(*[path[pos[j]] for j in range(q.ell)])
    return float(np.sum(vals))


def _sample_paths(model, idx: np.ndarray, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    return np.asarray(model.sample_at(idx, n_paths, rng), dtype=float)


def sample_sums(model, q: IndexFamily, G: Observable, N_list: Sequence[int], M: int, seed: int,
                threads: int = 1, chunk_cells: int = 20_000_000) -> np.ndarray:
    """M independent draws of S_N for each N in ``N_list``; shape (M, len(N_list)).

    Paths are split into chunks whose seeds are spawned from ``seed``, so the
    result does not depend on ``threads``.
    """
    N_list = [int(n) for n in N_list]
    if not N_list or min(N_list) < 1:
        raise ValidationError("N_list must contain positive horizons")
    Nmax = max(N_list)
    tab = q.table(Nmax)
    uniq, inv = np.unique(tab.ravel(), return_inverse=True)
    inv = inv.reshape(tab.shape)
    per = max(1, min(M, chunk_cells // max(uniq.size, 1)))
    n_chunks = -(-M // per)
    seqs = np.random.SeedSequence(int(seed)).spawn(n_chunks)
    cols = np.array(N_list) - 1

    def run(c):
        m = min(per, M - c * per)
        rng = np.random.default_rng(seqs[c])
        X = _sample_paths(model, uniq, m, rng)
        vals = G(*[X[:, inv[j]] for j in range(q.ell)])
        return np.cumsum(vals, axis=1)[:, cols]

    if threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, range(n_chunks)))
    else:
        parts = [run(c) for c in range(n_chunks)]
    return np.vstack(parts)


# --------------------------------------------------------------------------
# Exact laws for finite chains and finite-alphabet Bernoulli shifts
# --------------------------------------------------------------------------


def chain_joint_law(chain: FiniteChain, times: Sequence[int], max_atoms: int = 2**20) -> Tuple[np.ndarray, np.ndarray]:
    """All state configurations at strictly increasing times with their probabilities.

    Returns (states, probs) with states of shape (S^d, d).
    """
    t = np.asarray(times, dtype=np.int64)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValidationError("times must be strictly increasing")
    S, d = chain.states, t.size
    if S ** d > max_atoms:
        raise UnsupportedError("joint law too large to enumerate")
    probs = chain.stationary().copy()
    powers: Dict[int, np.ndarray] = {}
    for i in range(1, d):
        gap = int(t[i] - t[i - 1])
        Pg = powers.get(gap)
        if Pg is None:
            Pg = np.linalg.matrix_power(chain.transition, gap)
            powers[gap] = Pg
        last = np.arange(probs.size) % S
        probs = (probs[:, None] * Pg[last, :]).ravel()
    codes = np.arange(S ** d, dtype=np.int64)
    states = np.empty((codes.size, d), dtype=np.int64)
    for i in range(d):
        states[:, i] = (codes // S ** (d - 1 - i)) % S
    return states, probs


def exact_sum_law(model, q: IndexFamily, G: Observable, N: int, max_atoms: int = 2**20) -> Tuple[np.ndarray, np.ndarray]:
    """Law of S_N by enumeration: (support values, probabilities).

    Works for finite chains (states at the distinct indices) and for
    finite-alphabet Bernoulli functionals (noise on the joint window).
    """
    tab = q.table(N)
    uniq, inv = np.unique(tab.ravel(), return_inverse=True)
    inv = inv.reshape(tab.shape)
    if isinstance(model, FiniteChain):
        states, probs = chain_joint_law(model, uniq, max_atoms)
        X = model.values[states]
    elif isinstance(model, BernoulliFunctional) and model.finite:
        offs = np.arange(-model.J, model.J + 1)
        support = np.unique((uniq[:, None] + offs[None, :]).ravel())
        m = model.alphabet.size
        if m ** support.size > max_atoms:
            raise UnsupportedError("joint law too large to enumerate")
        combos = np.array(list(product(range(m), repeat=support.size)), dtype=np.int64)
        probs = np.prod(model.probs[combos], axis=1)
        eps = model.alphabet[combos]
        pos = np.searchsorted(support, uniq[:, None] + offs[None, :])
        X = model.evaluate(eps[:, pos])
    else:
        raise UnsupportedError("exact law needs a finite chain or a finite Bernoulli functional")
    S = np.sum(G(*[X[:, inv[j]] for j in range(q.ell)]), axis=1)
    vals, back = np.unique(np.round(S, 12), return_inverse=True)
    return vals, np.bincount(back, weights=probs, minlength=vals.size)


def exact_sum_variance(chain: FiniteChain, q: IndexFamily, G: Observable, N: int) -> float:
    """Var(S_N) for a stationary finite chain from pairwise joint laws.

    For iid chains only pairs of summands that share an index contribute.
    """
    tab = q.table(N)
    iid = bool(np.all(chain.transition == chain.transition[0]))
    mean_single = []
    single_sq = []
    cache: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]] = {}

    def moment(times: Tuple[int, ...], f) -> float:
        key_times = tuple(sorted(set(times)))
        base = key_times[0]
        shifted = tuple(t - base for t in key_times)
        law = cache.get(shifted)
        if law is None:
            law = chain_joint_law(chain, shifted)
            cache[shifted] = law
        states, probs = law
        where = {t: i for i, t in enumerate(key_times)}
        vals = chain.values[states]
        return float(np.dot(probs, f(vals, where)))

    def g_at(vals, where, times):
        return G(*[vals[:, where[t]] for t in times])

    for n in range(N):
        times = tuple(int(v) for v in tab[:, n])
        mean_single.append(moment(times, lambda v, w, tt=times: g_at(v, w, tt)))
        single_sq.append(moment(times, lambda v, w, tt=times: g_at(v, w, tt) ** 2))
    total = sum(single_sq) - sum(m ** 2 for m in mean_single)
    if iid:
        owners: Dict[int, List[int]] = {}
        for n in range(N):
            for v in set(int(x) for x in tab[:, n]):
                owners.setdefault(v, []).append(n)
        pairs = set()
        for lst in owners.values():
            for a in lst:
                for b in lst:
                    if a < b:
                        pairs.add((a, b))
    else:
        pairs = {(a, b) for a in range(N) for b in range(a + 1, N)}
    for a, b in sorted(pairs):
        ta = tuple(int(v) for v in tab[:, a])
        tb = tuple(int(v) for v in tab[:, b])
        e = moment(ta + tb, lambda v, w: g_at(v, w, ta) * g_at(v, w, tb))
        total += 2.0 * (e - mean_single[a] * mean_single[b])
    return float(total)


# --------------------------------------------------------------------------
# Decomposition
# --------------------------------------------------------------------------


@dataclass
class Decomposition:
    """Ḡ, the marginal tables M_j and the pieces G_k, ..., G_ℓ on atoms.

    ``marginals[j]`` has shape (m,)*j and holds ∫G(x_1..x_j, z) dμ^{ℓ−j}(z);
    ``components[j]`` is G_j as a table over its first j coordinates.
    """

    mu: FiniteMeasure
    ell: int
    k: int
    g_bar: float
    marginals: Dict[int, np.ndarray]
    components: Dict[int, np.ndarray]
    table: np.ndarray

    def evaluate(self, j: int, *xs) -> np.ndarray:
        if j not in self.components:
            raise ValidationError(f"no component G_{j}")
        idx = tuple(self.mu.index_of(x) for x in xs[:j])
        return self.components[j][idx]

    def telescoping_error(self) -> float:
        """max |G − Ḡ − Σ_j G_j| over all atoms of 𝒳^ℓ."""
        shape = (self.mu.size,) * self.ell
        acc = np.full(shape, self.g_bar)
        for j, comp in self.components.items():
            acc = acc + comp.reshape(comp.shape + (1,) * (self.ell - j))
        return float(np.max(np.abs(self.table - acc)))

    def centering_error(self) -> float:
        """max over x̄ of |∫G_ℓ(x̄, z) dμ(z)|."""
        return float(np.max(np.abs(self.components[self.ell] @ self.mu.weights)))

    def g_ell_second_moment(self) -> float:
        w = _product_weights(self.mu, self.ell)
        return float(np.sum(w * self.components[self.ell] ** 2))

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["component", "coords", "value"])
            wr.writerow(["g_bar", "", repr(self.g_bar)])
            for j, comp in sorted(self.components.items()):
                for idx in np.ndindex(comp.shape):
                    coords = ";".join(repr(float(self.mu.atoms[i])) for i in idx)
                    wr.writerow([f"G_{j}", coords, repr(float(comp[idx]))])


def _product_weights(mu: FiniteMeasure, d: int) -> np.ndarray:
    w = np.ones(())
    for _ in range(d):
        w = np.multiply.outer(w, mu.weights)
    return w


def decompose(G: Observable, mu: FiniteMeasure, k: int = 0) -> Decomposition:
    """Exact marginalization of G against μ on a finite alphabet."""
    ell = G.ell
    if not 0 <= k < ell:
        raise ValidationError("k must satisfy 0 <= k < ell")
    T = G.table(mu)
    marg = {ell: T}
    cur = T
    for j in range(ell - 1, -1, -1):
        cur = cur @ mu.weights
        marg[j] = cur
    g_bar = float(marg[0])
    comps = {}
    for j in range(k + 1, ell + 1):
        prev = marg[j - 1]
        comps[j] = marg[j] - prev[..., None]
    if k > 0:
        comps[k] = marg[k] - g_bar
    return Decomposition(mu=mu, ell=ell, k=k, g_bar=g_bar, marginals=marg, components=comps, table=T)


# --------------------------------------------------------------------------
# ζ functions
# --------------------------------------------------------------------------


def _inner_modulus(T: np.ndarray, w: np.ndarray, t) -> np.ndarray:
    """|∫ e^{itT(..., z)} dμ(z)| for each leading index; t broadcast in front."""
    t = np.asarray(t, dtype=float)
    ph = np.exp(1j * t.reshape(t.shape + (1,) * T.ndim) * T)
    return np.abs(ph @ w)


def zeta(G: Observable, mu: FiniteMeasure, t) -> np.ndarray:
    """ζ(t) = ∫|∫ e^{itG(x̄, z)} dμ(z)| dμ^{ℓ−1}(x̄), exact on atoms."""
    T = G.table(mu)
    inner = _inner_modulus(T, mu.weights, t)
    wl = _product_weights(mu, G.ell - 1)
    t_arr = np.asarray(t, dtype=float)
    axes = tuple(range(t_arr.ndim, inner.ndim))
    out = np.sum(inner * wl, axis=axes) if axes else inner * wl
    return np.minimum(out, 1.0) if np.ndim(out) else float(min(out, 1.0))


def zeta_y_table(G: Observable, mu: FiniteMeasure, k: int, t: float) -> np.ndarray:
    """ζ(y, t) for every y ∈ atoms^k; shape (m,)*k."""
    if not 0 <= k < G.ell:
        raise ValidationError("k must satisfy 0 <= k < ell")
    T = G.table(mu)
    inner = _inner_modulus(T, mu.weights, float(t))
    for _ in range(G.ell - 1 - k):
        inner = inner @ mu.weights
    return np.minimum(inner, 1.0)


def zeta_y(G: Observable, mu: FiniteMeasure, y: Sequence[float], t: float) -> float:
    """ζ(y, t) with the first len(y) coordinates frozen at y."""
    k = len(y)
    tab = zeta_y_table(G, mu, k, t)
    return float(tab[tuple(mu.index_of(v) for v in y)])


def zeta_identity_error(G: Observable, mu: FiniteMeasure, k: int, t: float) -> float:
    """|Σ_y μ^k(y) ζ(y, t) − ζ(t)|, the stationarity identity for Y_n."""
    tab = zeta_y_table(G, mu, k, t)
    return abs(float(np.sum(_product_weights(mu, k) * tab)) - float(zeta(G, mu, t)))


def zeta_lipschitz_constant(G: Observable, mu: FiniteMeasure, k: int, t: float) -> float:
    """Smallest C with |ζ(y,t) − ζ(y′,t)| ≤ C|t| Σ|y_j − y′_j|^κ over atom pairs."""
    tab = zeta_y_table(G, mu, k, t).ravel()
    kappa = G.holder[1]
    pts = np.array(list(product(mu.atoms, repeat=k))) if k else np.zeros((1, 0))
    best = 0.0
    for a in range(len(pts)):
        d = np.sum(np.abs(pts[a] - pts) ** kappa, axis=1)
        mask = d > 0
        if np.any(mask) and t != 0:
            best = max(best, float(np.max(np.abs(tab[a] - tab[mask]) / (abs(t) * d[mask]))))
    return best


@dataclass
class ExpansionCheck:
    t: np.ndarray
    residual: np.ndarray
    slope: float
    curvature_exact: float
    curvature_fd: float

    @property
    def passed(self) -> bool:
        return self.slope >= 2.9 and abs(self.curvature_fd - self.curvature_exact) <= 1e-3


def zeta_expansion_check(G: Observable, mu: FiniteMeasure,
                         t_small: Sequence[float] = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3),
                         h: float = 1e-2) -> ExpansionCheck:
    """Residual of ζ(t) − 1 + ½t²∫G_ℓ² dμ^ℓ and its log-log slope.

    The curvature is also read off by a central difference at step ``h``
    (ζ is even in t), to compare with the enumerated ∫G_ℓ² dμ^ℓ.
    """
    dec = decompose(G, mu)
    c2 = dec.g_ell_second_moment()
    t = np.asarray(t_small, dtype=float)
    z = np.asarray(zeta(G, mu, t), dtype=float)
    res = np.abs(z - 1.0 + 0.5 * t ** 2 * c2)
    pos = res > 1e-15
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(t[pos]), np.log(res[pos]), 1)[0])
    else:
        slope = math.inf
    z_h = float(zeta(G, mu, h))
    fd = 2.0 * (1.0 - z_h) / h ** 2
    return ExpansionCheck(t=t, residual=res, slope=slope, curvature_exact=c2, curvature_fd=fd)


def _find_unit_zeta(G: Observable, mu: FiniteMeasure, grid: np.ndarray, tol: float) -> Optional[float]:
    """Smallest grid-refined t where ζ(t) reaches 1 within ``tol``."""
    z = np.asarray(zeta(G, mu, grid))
    gap = 1.0 - z
    for i in range(len(grid)):
        if gap[i] <= tol:
            return float(grid[i])
        left = gap[i - 1] if i > 0 else np.inf
        right = gap[i + 1] if i + 1 < len(grid) else np.inf
        if gap[i] <= left and gap[i] <= right:
            lo = grid[max(i - 1, 0)]
            hi = grid[min(i + 1, len(grid) - 1)]
            if hi <= lo:
                continue
            res = optimize.minimize_scalar(lambda s: 1.0 - float(zeta(G, mu, s)), bounds=(lo, hi),
                                           method="bounded", options={"xatol": 1e-12})
            if res.fun <= tol:
                return float(res.x)
    return None


def lattice_classify(G: Observable, mu, t_max: float = 20.0, n_grid: int = 4000,
                     tol: float = 1e-9) -> Dict:
    """Brute-force lattice / non-arithmetic / degenerate verdict on atoms.

    Integer-valued G is scanned on (0, π]; otherwise on [0.05, ``t_max``].
    A unit of ζ at t* means e^{it*G} depends on x̄ only, so the last
    coordinate lives on a lattice of span 2π/t*.
    """
    if not isinstance(mu, FiniteMeasure):
        raise UnsupportedError("classification needs a finite alphabet")
    dec = decompose(G, mu)
    if np.max(np.abs(dec.components[G.ell])) <= 1e-12:
        return {"verdict": "degenerate", "span": None, "t_star": None, "zeta_max": 1.0}
    T = dec.table
    integer = bool(np.all(np.abs(T - np.round(T)) <= 1e-12))
    if integer:
        grid = np.linspace(np.pi / n_grid, np.pi, n_grid)
    else:
        grid = np.linspace(0.05, t_max, n_grid)
    z = np.asarray(zeta(G, mu, grid))
    t_star = _find_unit_zeta(G, mu, grid, tol)
    if integer:
        span = 1.0 if t_star is None else 2 * np.pi / t_star
        return {"verdict": "lattice", "span": float(span), "t_star": t_star, "zeta_max": float(z.max())}
    if t_star is None:
        return {"verdict": "non-arithmetic", "span": None, "t_star": None, "zeta_max": float(z.max()),
                "grid": [float(grid[0]), float(grid[-1])]}
    return {"verdict": "lattice", "span": float(2 * np.pi / t_star), "t_star": t_star, "zeta_max": 1.0}


def classification_json(result: Dict) -> str:
    return json.dumps(result, sort_keys=True)


def zeta_table_csv(G: Observable, mu: FiniteMeasure, t_grid: Sequence[float], path: str) -> None:
    vals = np.atleast_1d(zeta(G, mu, np.asarray(t_grid, dtype=float)))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "zeta"])
        for t, v in zip(t_grid, vals):
            wr.writerow([repr(float(t)), repr(float(v))])


# --------------------------------------------------------------------------
# Asymptotic variance
# --------------------------------------------------------------------------


@dataclass
class VarianceReport:
    rows: List[Dict[str, float]]
    estimate: float
    extrapolated: float
    degenerate: bool
    note: str = ""

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "estimate": self.estimate, "extrapolated": self.extrapolated,
                           "degenerate": self.degenerate, "note": self.note}, sort_keys=True)


def asymptotic_variance(model, q: IndexFamily, G: Observable, N_grid: Sequence[int], M: int,
                        seed: int = 0, mu: Optional[FiniteMeasure] = None, threads: int = 1) -> VarianceReport:
    """Monte Carlo (1/N)Var(S_N) across ``N_grid`` with 3σ bands.

    ``extrapolated`` is the weighted intercept of a fit in 1/N when the grid
    has at least three horizons. For k = 0 on a finite alphabet D² = 0
    exactly when G is μ^ℓ-a.s. constant, and that case short-circuits.
    """
    N_grid = sorted(int(n) for n in N_grid)
    if mu is None:
        try:
            mu = FiniteMeasure.from_model(model)
        except (ValidationError, AttributeError):
            mu = None
    if mu is not None:
        T = G.table(mu)
        support = _product_weights(mu, G.ell) > 0
        const = np.ptp(T[support]) <= 1e-14
        if const:
            rows = [{"N": n, "value": 0.0, "lower": 0.0, "upper": 0.0} for n in N_grid]
            return VarianceReport(rows, 0.0, 0.0, True, "G is constant on the support of mu^ell")
    S = sample_sums(model, q, G, N_grid, M, seed, threads=threads)
    rows = []
    for i, n in enumerate(N_grid):
        x = S[:, i]
        v = float(x.var(ddof=1))
        c4 = float(np.mean((x - x.mean()) ** 4))
        se = math.sqrt(max(c4 - v ** 2, 0.0) / M)
        rows.append({"N": n, "value": v / n, "lower": max(v - 3 * se, 0.0) / n, "upper": (v + 3 * se) / n})
    est = rows[-1]["value"]
    extra = est
    if len(rows) >= 3:
        x = np.array([1.0 / r["N"] for r in rows])
        y = np.array([r["value"] for r in rows])
        wts = np.array([1.0 / max(r["upper"] - r["lower"], 1e-12) for r in rows])
        extra = float(np.polyfit(x, y, 1, w=wts)[1])
    degenerate = rows[-1]["lower"] <= 0.0
    note = "CI of the largest horizon reaches 0" if degenerate else ""
    return VarianceReport(rows, est, extra, degenerate, note)


def green_kubo(chain: FiniteChain, g_values: Sequence[float], n_terms: int = 50) -> float:
    """Var g(ξ_0) + 2 Σ_{k=1}^{n_terms} cov(g(ξ_0), g(ξ_k)) from matrix powers."""
    pi = chain.stationary()
    g = np.asarray(g_values, dtype=float)
    mean = float(pi @ g)
    gc = g - mean
    total = float(pi @ gc ** 2)
    v = gc.copy()
    for _ in range(n_terms):
        v = chain.transition @ v
        total += 2.0 * float(pi @ (gc * v))
    return total


def independent_variance(G: Observable, mu: FiniteMeasure) -> float:
    """Var of G under μ^ℓ (the D² of fully separated iid configurations)."""
    T = G.table(mu)
    w = _product_weights(mu, G.ell)
    m = float(np.sum(w * T))
    return float(np.sum(w * (T - m) ** 2))


# --------------------------------------------------------------------------
# Auxiliary processes Y_n and Ξ_n
# --------------------------------------------------------------------------


def _check_seeds(seeds: Sequence[int], k: int) -> List[int]:
    seeds = [int(s) for s in seeds]
    if len(seeds) != k:
        raise ValidationError(f"need {k} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValidationError("copies must be seeded disjointly (overlapping seeds)")
    return seeds


def _bernoulli_with_approx(bf: BernoulliFunctional, idx: np.ndarray, n_paths: int, r: int,
                           rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    J = bf.J
    offs = np.arange(-J, J + 1)
    support = np.unique((idx[:, None] + offs[None, :]).ravel())
    eps = bf.draw(rng, (n_paths, support.size))
    pos = np.searchsorted(support, idx[:, None] + offs[None, :])
    win = eps[:, pos]
    fresh = bf.draw(rng, win.shape)
    inside = np.abs(offs) <= r
    mixed = np.where(inside[None, None, :], win, fresh)
    return bf.evaluate(win), bf.evaluate(mixed)


def build_Y_process(model, k: int, N: int, n_paths: int, seeds: Sequence[int],
                    r: Optional[int] = None) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Y_n = (X^{(1)}_n, X^{(2)}_{2n}, ..., X^{(k)}_{kn}) from k independent copies.

    Returns an array of shape (n_paths, N, k). With ``r`` (Bernoulli
    functionals only) the pair (Y, Y_r) is returned.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    seeds = _check_seeds(seeds, k)
    n = np.arange(1, N + 1)
    Y = np.empty((n_paths, N, k))
    Yr = np.empty_like(Y) if r is not None else None
    for j in range(1, k + 1):
        rng = np.random.default_rng(seeds[j - 1])
        idx = j * n
        if r is None:
            Y[:, :, j - 1] = model.sample_at(idx, n_paths, rng)
        else:
            if not isinstance(model, BernoulliFunctional):
                raise UnsupportedError("approximants Y_{n,r} need a Bernoulli functional")
            x, xr = _bernoulli_with_approx(model, idx, n_paths, int(r), rng)
            Y[:, :, j - 1] = x
            Yr[:, :, j - 1] = xr
    return Y if r is None else (Y, Yr)


def build_Xi(tower, ell: int, N: int, n_paths: int, seeds: Sequence[int]) -> np.ndarray:
    """Ξ_n = (ξ^{(1)}_n, ξ^{(2)}_{2n}, ..., ξ^{(ℓ−1)}_{(ℓ−1)n}) as tower cells.

    Each copy is an exact symbolic orbit of a μ-distributed point.
    Shape (n_paths, N, ℓ−1).
    """
    from .transfer_ops import sample_orbit_cells

    k = ell - 1
    if k < 1:
        raise ValidationError("ell must be >= 2")
    seeds = _check_seeds(seeds, k)
    out = np.empty((n_paths, N, k), dtype=np.int64)
    n = np.arange(1, N + 1)
    for j in range(1, k + 1):
        rng = np.random.default_rng(seeds[j - 1])
        cells = sample_orbit_cells(tower, j * N, n_paths, rng)
        out[:, :, j - 1] = cells[:, j * n]
    return out


def pair_statistic(Y: np.ndarray, lag: int, f=lambda a, b: a * b) -> np.ndarray:
    """Mean of f(Y_n, Y_{n+lag}) per n, pooled over paths and coordinates."""
    a = Y[:, :-lag] if lag else Y
    b = Y[:, lag:]
    return f(a, b).mean(axis=(0, 2))


def y_mixing_check(chain: FiniteChain, k: int, times: Sequence[int], f_tables: Sequence[np.ndarray]) -> Tuple[float, float]:
    """Exact lhs and rhs of the Y-mixing bound for r = 0.

    ``f_tables[s]`` has shape (S,)*k, values in [−1, 1], and is evaluated at
    Y_{n_s}. The rhs is 4 Σ_j Σ_s φ(j(n_{s+1} − n_s)) with exact φ.
    """
    n = [int(v) for v in times]
    m = len(n)
    if m < 2 or any(b <= a for a, b in zip(n, n[1:])):
        raise ValidationError("times must be strictly increasing with at least two entries")
    if len(f_tables) != m:
        raise ValidationError("one table per time")
    S = chain.states
    for f in f_tables:
        if np.asarray(f).shape != (S,) * k or np.max(np.abs(f)) > 1 + 1e-12:
            raise ValidationError("tables must have shape (S,)*k and sup norm <= 1")
    laws = [chain_joint_law(chain, [j * v for v in n]) for j in range(1, k + 1)]
    # joint law of (Y_{n_1}, ..., Y_{n_m}): product over copies
    probs = np.ones(1)
    states = np.zeros((1, m, 0), dtype=np.int64)
    for st, pr in laws:
        probs = np.multiply.outer(probs, pr).ravel()
        a = np.repeat(states, st.shape[0], axis=0)
        b = np.tile(st, (states.shape[0], 1))[:, :, None]
        states = np.concatenate([a, b], axis=2)
    prod_f = np.ones(probs.size)
    marg = []
    pi = chain.stationary()
    wk = _product_weights(FiniteMeasure(np.arange(S, dtype=float), pi), k)
    for s in range(m):
        vals = np.asarray(f_tables[s])[tuple(states[:, s, j] for j in range(k))]
        prod_f = prod_f * vals
        marg.append(float(np.sum(wk * np.asarray(f_tables[s]))))
    lhs = abs(float(probs @ prod_f) - float(np.prod(marg)))
    rhs = 0.0
    for j in range(1, k + 1):
        for s in range(m - 1):
            gap = j * (n[s + 1] - n[s])
            rhs += 4.0 * (phi_exact(chain, gap) if gap >= 1 else 1.0)
    return lhs, rhs
