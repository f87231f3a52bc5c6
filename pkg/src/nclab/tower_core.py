"""Young towers over the unit interval with a cylinder-cell discretization.

The base Δ₀ = [0, 1] is cut into branch intervals I_j of length ν₀(I_j) = w_j,
each mapped increasingly onto [0, 1] by f₀ and carrying a return time R_j.
Branches are affine unless a quadratic distortion δ_j is given, in which case
the inverse branch is ψ_j(y) = a_j + w_j (y + δ_j y (1 - y)).

Grid cells are pairs (floor k, base cylinder of depth D) whose first symbol
j has R_j > k. Functions constant on cells form the discrete space. For
affine branches the transfer operator maps this space into itself, so all
operator identities hold to rounding error; for distorted branches the
operator is the Ulam (cell-average) projection.

Two cells on the same floor have a well-defined separation time, fixed by
the first symbol where their words differ, so the grid Lipschitz seminorms
are exact for cell functions.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property, reduce
from math import gcd
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .errors import AperiodicityError, ConvergenceError, TailError, ValidationError

logger = logging.getLogger(__name__)

INF = float("inf")


@dataclass(frozen=True)
class TowerSpec:
    """Return times, base masses and distortions of a finite-branch tower.

    Parameters
    ----------
    return_times : sequence of int
        R_j >= 1, with gcd 1.
    masses : sequence of float
        ν₀(Δ₀^j); must sum to 1.
    beta : float
        Base of the separation metrics, in (0, 1).
    distortion : sequence of float, optional
        Quadratic distortion δ_j in (-1, 1) per branch; 0 means affine.
    tail : (p, q), optional
        Tail constants. Fitted from the return-time law when omitted.
    depth : int
        Cylinder depth D of the grid.
    """

    return_times: Tuple[int, ...]
    masses: Tuple[float, ...]
    beta: float = 0.5
    distortion: Optional[Tuple[float, ...]] = None
    tail: Optional[Tuple[float, float]] = None
    depth: int = 6

    def __post_init__(self):
        R = tuple(int(r) for r in self.return_times)
        w = tuple(float(m) for m in self.masses)
        object.__setattr__(self, "return_times", R)
        object.__setattr__(self, "masses", w)
        d = (0.0,) * len(R) if self.distortion is None else tuple(float(x) for x in self.distortion)
        object.__setattr__(self, "distortion", d)
        if len(R) == 0 or len(R) != len(w) or len(d) != len(R):
            raise ValidationError("return_times, masses and distortion must have equal non-zero length")
        if min(R) < 1:
            raise ValidationError("return times must be >= 1")
        if min(w) <= 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValidationError("masses must be positive and sum to 1")
        if not 0.0 < self.beta < 1.0:
            raise ValidationError("beta must lie in (0, 1)")
        if any(abs(x) >= 1.0 for x in d):
            raise ValidationError("distortion must lie in (-1, 1)")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if reduce(gcd, R) != 1:
            raise AperiodicityError(f"gcd of return times {R} is {reduce(gcd, R)}, need 1")

    def with_depth(self, depth: int) -> "TowerSpec":
        return TowerSpec(self.return_times, self.masses, self.beta, self.distortion, self.tail, depth)


def golden_spec(depth: int = 8) -> TowerSpec:
    """The reference two-branch affine tower: R = (1, 2), masses (2/3, 1/3)."""
    return TowerSpec(return_times=(1, 2), masses=(2.0 / 3.0, 1.0 / 3.0), beta=0.5, depth=depth)


def tall_spec(depth: int = 4) -> TowerSpec:
    """Four affine branches reaching floor 12, used for the Lasota–Yorke suite."""
    R = (1, 3, 6, 13)
    raw = np.exp(-0.35 * np.array(R, dtype=float))
    w = raw / raw.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return TowerSpec(return_times=R, masses=tuple(w), beta=0.5, depth=depth)


class Tower:
    """Discretized Young tower built from a :class:`TowerSpec`.

    Attributes
    ----------
    n_cells : int
    floor, word : ndarray
        Floor index and base-cylinder code of each cell (first symbol most
        significant, base J).
    lo, hi : ndarray
        Base interval of each cell.
    m0 : ndarray
        Normalized lifted reference measure of each cell (sums to 1).
    v : ndarray
        Weight e^{kp/2} on each cell.
    P : scipy.sparse.csr_matrix
        Transfer operator w.r.t. m0 acting on cell-value vectors.
    """

    def __init__(self, spec: TowerSpec):
        self.spec = spec
        self.R = np.array(spec.return_times, dtype=np.int64)
        self.w = np.array(spec.masses, dtype=float)
        self.delta = np.array(spec.distortion, dtype=float)
        self.J = self.R.size
        self.D = spec.depth
        self.beta = spec.beta
        self.a = np.concatenate([[0.0], np.cumsum(self.w)[:-1]])
        self.affine = bool(np.all(self.delta == 0.0))
        self.R_max = int(self.R.max())
        self.Z = float(np.dot(self.w, self.R))
        self.expanding = bool(np.all(self.w * (1.0 + np.abs(self.delta)) < 1.0) or self.J == 1)
        if not self.expanding:
            logger.warning("branch maps are not uniformly expanding; generating-partition property unchecked")
        self.p, self.q = self._tail_constants()
        self._layout()
        self.P = self._assemble_P()
        self._h0 = None

    # ---- branch maps -------------------------------------------------------

    def psi(self, j, y):
        """Inverse branch ψ_j: [0,1] → I_j."""
        j = np.asarray(j)
        d = self.delta[j]
        return self.a[j] + self.w[j] * (y + d * y * (1.0 - y))

    def f0(self, x):
        """Base map and branch index: returns (f₀(x), j)."""
        x = np.asarray(x, dtype=float)
        j = np.clip(np.searchsorted(self.a, x, side="right") - 1, 0, self.J - 1)
        s = np.clip((x - self.a[j]) / self.w[j], 0.0, 1.0)
        d = self.delta[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = np.sqrt(np.maximum((1.0 + d) ** 2 - 4.0 * d * s, 0.0))
            y_quad = ((1.0 + d) - disc) / (2.0 * d)
        y = np.where(d == 0.0, s, y_quad)
        return np.clip(y, 0.0, 1.0), j

    def jacobian(self, x):
        """JF^R at base point x, i.e. f₀'(x) with respect to Lebesgue."""
        y, j = self.f0(x)
        return 1.0 / (self.w[j] * (1.0 + self.delta[j] * (1.0 - 2.0 * y)))

    # ---- tails -------------------------------------------------------------

    def tail(self, n: int) -> float:
        """m₀{x ∈ Δ₀ : R(x) > n} with m₀ normalized on the whole tower."""
        return float(self.w[self.R > n].sum() / self.Z)

    def _tail_constants(self) -> Tuple[float, float]:
        ns = np.arange(0, self.R_max + 1)
        tails = np.array([self.tail(n) for n in ns])
        if self.spec.tail is not None:
            p, q = map(float, self.spec.tail)
            if p <= 0 or q <= 0:
                raise TailError("tail constants must be positive")
            bad = tails > q * np.exp(-p * ns) * (1 + 1e-12)
            if np.any(bad):
                raise TailError(f"tail bound fails at n={int(ns[bad][0])}")
            return p, q
        pos = (ns >= 1) & (tails > 0)
        if not np.any(pos):
            return 1.0, 1.0
        p = float(np.min(-np.log(tails[pos]) / ns[pos]))
        return p, 1.0

    # ---- grid ----------------------------------------------------------------

    def _layout(self):
        J, D = self.J, self.D
        codes = np.arange(J ** D, dtype=np.int64)
        digits = np.empty((codes.size, D), dtype=np.int64)
        rem = codes.copy()
        for i in range(D - 1, -1, -1):
            digits[:, i] = rem % J
            rem //= J
        lo = np.zeros(codes.size)
        hi = np.ones(codes.size)
        for i in range(D - 1, -1, -1):
            lo = self.psi(digits[:, i], lo)
            hi = self.psi(digits[:, i], hi)
        self._digits_all = digits
        floor, word = [], []
        for k in range(self.R_max):
            ok = self.R[digits[:, 0]] > k
            floor.append(np.full(ok.sum(), k, dtype=np.int64))
            word.append(codes[ok])
        self.floor = np.concatenate(floor)
        self.word = np.concatenate(word)
        self.n_cells = self.floor.size
        self.lo = lo[self.word]
        self.hi = hi[self.word]
        self.length = self.hi - self.lo
        self.digits = digits[self.word]
        self.branch = self.digits[:, 0]
        self.index = np.full((self.R_max, J ** D), -1, dtype=np.int64)
        self.index[self.floor, self.word] = np.arange(self.n_cells)
        self.m0 = self.length / self.Z
        self.v = np.exp(self.floor * self.p / 2.0)
        self.m = self.v * self.m0
        self.floor_cells = [np.flatnonzero(self.floor == k) for k in range(self.R_max)]
        # prefix sums of return times over symbols 1..i-1 of each word
        Rw = self.R[self.digits]
        pre = np.zeros((self.n_cells, D + 1), dtype=np.int64)
        if D > 1:
            pre[:, 2:] = np.cumsum(Rw[:, 1:D], axis=1)
        self._prefix_R = pre

    def _assemble_P(self) -> sparse.csr_matrix:
        J, D = self.J, self.D
        rows, cols, vals = [], [], []
        up = np.flatnonzero(self.floor >= 1)
        rows.append(up)
        cols.append(self.index[self.floor[up] - 1, self.word[up]])
        vals.append(np.ones(up.size))
        base = self.floor_cells[0]
        w_base = self.word[base]
        for j in range(J):
            target_word = j * J ** (D - 1) + w_base // J
            tgt = self.index[self.R[j] - 1, target_word]
            if self.delta[j] == 0.0:
                wt = np.full(base.size, self.w[j])
            else:
                wt = (self.psi(j, self.hi[base]) - self.psi(j, self.lo[base])) / self.length[base]
            rows.append(base)
            cols.append(tgt)
            vals.append(wt)
        M = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.n_cells, self.n_cells))
        M.sum_duplicates()
        return M

    # ---- integrals and norms -----------------------------------------------

    def integral(self, g, measure: str = "m0"):
        wts = {"m0": self.m0, "m": self.m, "mu": self.m0 * self.h0}[measure]
        return np.tensordot(wts, np.asarray(g), axes=(0, 0))

    def floor_indicator(self, k: int) -> np.ndarray:
        return (self.floor == k).astype(float)

    @cached_property
    def _pair_tables(self) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
        """Per floor: (s_U, s_NU) separation matrices between cells."""
        out = {}
        for k, cells in enumerate(self.floor_cells):
            dg = self.digits[cells]
            neq = dg[:, None, :] != dg[None, :, :]
            any_neq = neq.any(axis=2)
            i = np.where(any_neq, neq.argmax(axis=2), self.D)
            s_nu = i.astype(float)
            r0 = self.R[dg[:, 0]]
            pre = self._prefix_R[cells]
            rows = np.broadcast_to(np.arange(cells.size)[:, None], i.shape)
            s_u = np.where(i == 0, 0, r0[:, None] - k + pre[rows, np.maximum(i, 1)]).astype(float)
            s_u[~any_neq] = INF
            s_nu[~any_neq] = INF
            out[k] = (s_u, s_nu)
        return out

    def inverse_distance(self, k: int, metric: str = "U") -> np.ndarray:
        """Matrix of 1/d(x, y) between cells on floor k (0 on the diagonal)."""
        key = (k, metric)
        cache = self.__dict__.setdefault("_invd", {})
        if key not in cache:
            s_u, s_nu = self._pair_tables[k]
            s = s_u if metric == "U" else s_nu
            with np.errstate(over="ignore"):
                inv = np.where(np.isinf(s), 0.0, self.beta ** (-np.where(np.isinf(s), 0, s)))
            cache[key] = inv
        return cache[key]

    def lip_floor(self, g, k: int, metric: str = "U") -> np.ndarray:
        """Grid Lipschitz seminorm |g|_{β,Δ_k}; ``g`` may carry trailing batch axes."""
        g = np.asarray(g)
        cells = self.floor_cells[k]
        gk = g[cells]
        if cells.size < 2:
            return np.zeros(g.shape[1:])
        inv = self.inverse_distance(k, metric)
        flat = gk.reshape(cells.size, -1)
        best = np.zeros(flat.shape[1])
        chunk = max(1, int(4e6 // max(cells.size ** 2, 1)))
        for s in range(0, flat.shape[1], chunk):
            blk = flat[:, s:s + chunk]
            diff = np.abs(blk[:, None, :] - blk[None, :, :]) * inv[:, :, None]
            best[s:s + chunk] = diff.max(axis=(0, 1))
        return best.reshape(g.shape[1:])

    def lip(self, g, metric: str = "U") -> np.ndarray:
        """max over floors of the per-floor seminorm."""
        return np.max(np.stack([self.lip_floor(g, k, metric) for k in range(self.R_max)]), axis=0)

    def weighted_norms(self, g) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(‖g‖_s, ‖g‖_h, ‖g‖_W) for a cell function or a batch (cells first)."""
        g = np.asarray(g)
        shape = g.shape[1:]
        s = np.zeros(shape)
        hn = np.zeros(shape)
        for k, cells in enumerate(self.floor_cells):
            vk = np.exp(k * self.p / 2.0)
            s = np.maximum(s, np.abs(g[cells]).max(axis=0) / vk)
            hn = np.maximum(hn, self.lip_floor(g, k) / vk)
        return s, hn, s + hn

    # ---- density -------------------------------------------------------------

    @property
    def h0(self) -> np.ndarray:
        if self._h0 is None:
            self._h0 = invariant_density(self)
        return self._h0

    @property
    def h(self) -> np.ndarray:
        return self.h0 / self.v

    @property
    def mu(self) -> np.ndarray:
        """μ-mass of each cell."""
        return self.h0 * self.m0

    # ---- points ------------------------------------------------------------

    def word_of(self, x, n_symbols: int) -> np.ndarray:
        """First ``n_symbols`` branch symbols of base points x."""
        x = np.atleast_1d(np.asarray(x, dtype=float)).copy()
        out = np.empty(x.shape + (n_symbols,), dtype=np.int64)
        for i in range(n_symbols):
            x, j = self.f0(x)
            out[..., i] = j
        return out

    def locate(self, x, k) -> np.ndarray:
        """Cell index of the point(s) (x, k)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), x.shape)
        dg = self.word_of(x, self.D)
        code = np.zeros(x.shape, dtype=np.int64)
        for i in range(self.D):
            code = code * self.J + dg[..., i]
        if np.any(k < 0) or np.any(k >= self.R_max):
            raise ValidationError("floor index out of range")
        idx = self.index[k, code]
        if np.any(idx < 0):
            raise ValidationError("point is not on the tower (floor above its return time)")
        return idx

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def to_csv(self, values, path: str) -> None:
        vals = np.asarray(values)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["floor", "cell", "value"])
            for c in range(self.n_cells):
                v = vals[c]
                wr.writerow([int(self.floor[c]), int(self.word[c]), repr(complex(v) if np.iscomplexobj(vals) else float(v))])


def build_tower(spec: TowerSpec) -> Tower:
    """Build the discretized tower; raises on aperiodic or tail-violating specs."""
    return Tower(spec)


def tower_map(tower: Tower, x, k):
    """F(x, k): lift one floor, or return through f₀ from the top floor."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=np.int64)
    _, j = tower.f0(x)
    Rx = tower.R[j]
    if np.any(k < 0) or np.any(k >= Rx):
        raise ValidationError("invalid floor index for point")
    fx, _ = tower.f0(x)
    lift = Rx > k + 1
    return np.where(lift, x, fx), np.where(lift, k + 1, 0)


def separation_and_metrics(tower: Tower, x: Tuple[float, int], y: Tuple[float, int],
                           n_symbols: int = 48) -> Tuple[float, float, float, float]:
    """(s_U, d_U, s_NU, d_NU) for two tower points given as (base coordinate, floor).

    Words are read up to ``n_symbols`` symbols; points agreeing that far are
    reported with the separation reached at the cap.
    """
    (xb, xk), (yb, yk) = x, y
    if xb == yb and xk == yk:
        return INF, 0.0, INF, 0.0
    if xk != yk:
        return 0.0, 1.0, 0.0, 1.0
    wx = tower.word_of(xb, n_symbols)[0]
    wy = tower.word_of(yb, n_symbols)[0]
    neq = np.flatnonzero(wx != wy)
    i = int(neq[0]) if neq.size else n_symbols
    s_nu = float(i)
    s_u = 0.0 if i == 0 else float(tower.R[wx[0]] - xk + tower.R[wx[1:i]].sum())
    return s_u, tower.beta ** s_u, s_nu, tower.beta ** s_nu


def invariant_density(tower: Tower, tol: float = 1e-12, max_iter: int = 5000) -> np.ndarray:
    """Power iteration for P h₀ = h₀ normalized by ∫h₀ dm₀ = 1."""
    h = np.ones(tower.n_cells)
    res = INF
    for it in range(max_iter):
        nh = tower.P @ h
        nh /= np.dot(tower.m0, nh)
        res = float(np.max(np.abs(tower.P @ nh - nh)))
        h = nh
        if res <= tol:
            logger.debug("invariant density converged after %d iterations (residual %.2e)", it + 1, res)
            break
    else:
        raise ConvergenceError(f"invariant density did not converge: residual {res:.3e}", residual=res)
    if np.any(h <= 0):
        raise ConvergenceError("invariant density is not positive", residual=res)
    return h


def power_iteration_steps(tower: Tower, tol: float, max_iter: int = 500) -> Tuple[int, float]:
    """Number of power-iteration steps from h = 1 needed to reach ‖Ph - h‖_∞ ≤ tol."""
    h = np.ones(tower.n_cells) / np.dot(tower.m0, np.ones(tower.n_cells))
    for it in range(1, max_iter + 1):
        nh = tower.P @ h
        nh /= np.dot(tower.m0, nh)
        res = float(np.max(np.abs(tower.P @ nh - nh)))
        h = nh
        if res <= tol:
            return it, res
    return max_iter, res


def jacobian_constant(tower: Tower, n_points: int = 2000, seed: int = 0) -> float:
    """Sampled C in |JF^R(x)/JF^R(y) − 1| ≤ C d_U(x, y) over same-branch base pairs."""
    rng = np.random.default_rng(seed)
    C = 0.0
    for j in range(tower.J):
        xs = tower.a[j] + tower.w[j] * rng.random((n_points, 2))
        xs = np.clip(xs, tower.a[j], tower.a[j] + tower.w[j] * (1 - 1e-12))
        jx, jy = tower.jacobian(xs[:, 0]), tower.jacobian(xs[:, 1])
        for (px, py), r in zip(xs[:64], np.abs(jx / jy - 1.0)[:64]):
            _, d, _, _ = separation_and_metrics(tower, (px, 0), (py, 0), n_symbols=40)
            if d > 0:
                C = max(C, r / d)
    return C


def fixed_point(tower: Tower, word: Sequence[int], iters: int = 200) -> float:
    """Base point x with f₀^{len(word)} x = x following the given branch word."""
    x = 0.5
    for _ in range(iters):
        y = x
        for j in reversed(word):
            y = float(tower.psi(int(j), y))
        x = y
    return x


def periodic_point(tower: Tower, word: Sequence[int]) -> Tuple[float, int, int]:
    """(x, floor 0, period) for the tower orbit following ``word`` on the base."""
    x = fixed_point(tower, word)
    return x, 0, int(sum(tower.R[j] for j in word))
