"""Mixing processes: finite Markov chains and Bernoulli-shift functionals.

Both model classes expose the same small sampling interface used by the
nonconventional-sum code:

* ``stationary_law()`` returns ``(atoms, weights)`` of the one-dimensional
  marginal,
* ``sample_at(indices, n_paths, rng)`` draws the process jointly at a sorted
  set of distinct integer times, without materializing the gaps.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import ValidationError

logger = logging.getLogger(__name__)

_NOISE_BLOCK = 1024
_INDEX_OFFSET = 2**40


# --------------------------------------------------------------------------
# Finite Markov chains
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteChain:
    """Stationary finite-state Markov chain.

    Parameters
    ----------
    transition : array_like, shape (S, S)
        Row-stochastic transition matrix.
    initial : array_like, optional
        Law of the first state. Defaults to the stationary vector.
    values : array_like, optional
        Real value attached to each state; defaults to the state labels
        ``0..S-1``.
    """

    transition: np.ndarray
    initial: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise ValidationError("transition must be a non-empty square matrix")
        if np.any(P < 0) or not np.all(np.isfinite(P)):
            raise ValidationError("transition has negative or non-finite entries")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValidationError("transition rows must sum to 1 within 1e-12")
        P.setflags(write=False)
        object.__setattr__(self, "transition", P)
        if self.initial is None:
            init = self.stationary()
        else:
            init = np.array(self.initial, dtype=float)
            if init.shape != (P.shape[0],) or np.any(init < 0):
                raise ValidationError("initial must be a probability vector")
            if abs(init.sum() - 1.0) > 1e-12:
                raise ValidationError("initial must sum to 1 within 1e-12")
        init.setflags(write=False)
        object.__setattr__(self, "initial", init)
        vals = np.arange(P.shape[0], dtype=float) if self.values is None else np.array(self.values, dtype=float)
        if vals.shape != (P.shape[0],):
            raise ValidationError("values must have one entry per state")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def states(self) -> int:
        return self.transition.shape[0]

    def is_irreducible(self) -> bool:
        n_comp, _ = connected_components(sparse.csr_matrix(self.transition > 0), directed=True,
                                         connection="strong")
        return n_comp == 1

    def stationary(self) -> np.ndarray:
        """Unique stationary vector; raises if the chain is reducible."""
        if not self.is_irreducible():
            raise ValidationError("reducible chain has no unique stationary law")
        if np.all(self.transition == self.transition[0]):
            return self.transition[0].copy()
        S = self.states
        A = np.vstack([self.transition.T - np.eye(S), np.ones((1, S))])
        b = np.zeros(S + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(A, b, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()

    def stationary_law(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.values.copy(), self.stationary()

    def sample_at(self, indices, n_paths: int, rng: np.random.Generator) -> np.ndarray:
        """Joint sample of the stationary chain at sorted distinct times.

        Returns values with shape ``(n_paths, len(indices))``.
        """
        return self.values[self.sample_states_at(indices, n_paths, rng)]

    def sample_states_at(self, indices, n_paths: int, rng: np.random.Generator) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1 or (idx.size > 1 and np.any(np.diff(idx) <= 0)):
            raise ValidationError("indices must be strictly increasing")
        out = np.empty((n_paths, idx.size), dtype=np.int64)
        if idx.size == 0:
            return out
        pi = self.stationary()
        if np.all(self.transition == self.transition[0]):
            # iid rows: every column is an independent draw from the row law
            cum = np.cumsum(self.transition[0])
            return np.minimum(np.searchsorted(cum, rng.random((n_paths, idx.size)), side="right"),
                              self.states - 1)
        out[:, 0] = _inverse_cdf(np.broadcast_to(np.cumsum(pi), (n_paths, self.states)), rng.random(n_paths))
        cache: Dict[int, np.ndarray] = {}
        for col in range(1, idx.size):
            gap = int(idx[col] - idx[col - 1])
            cum = cache.get(gap)
            if cum is None:
                cum = np.cumsum(np.linalg.matrix_power(self.transition, gap), axis=1)
                cache[gap] = cum
            out[:, col] = _inverse_cdf(cum[out[:, col - 1]], rng.random(n_paths))
        return out


def _inverse_cdf(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # rows of cumulative probabilities; guard against round-off in the last entry
    k = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(k, cum.shape[1] - 1)


def iid_chain(probs: Sequence[float], values: Optional[Sequence[float]] = None) -> FiniteChain:
    """Chain whose rows all equal ``probs`` (an iid sequence)."""
    p = np.asarray(probs, dtype=float)
    return FiniteChain(np.tile(p, (p.size, 1)), initial=p, values=values)


def two_state_chain(p: float, q: float, values=None) -> FiniteChain:
    """Chain with P(0→1) = p and P(1→0) = q."""
    return FiniteChain(np.array([[1 - p, p], [q, 1 - q]]), values=values)


def simulate_chain(chain: FiniteChain, n_steps: int, seed: int) -> np.ndarray:
    """Trajectory of state labels of length ``n_steps`` started from ``chain.initial``."""
    if not isinstance(chain, FiniteChain):
        raise ValidationError("chain must be a FiniteChain")
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random(n_steps)
    cum = np.cumsum(chain.transition, axis=1)
    cum[:, -1] = 1.0
    out = np.empty(n_steps, dtype=np.int64)
    s = int(np.searchsorted(np.cumsum(chain.initial), u[0], side="right"))
    s = min(s, chain.states - 1)
    out[0] = s
    rows = [row for row in cum]
    for i in range(1, n_steps):
        s = int(np.searchsorted(rows[s], u[i], side="right"))
        out[i] = s
    return out


def phi_exact(chain: FiniteChain, n: int) -> float:
    """Exact φ(n): worst total-variation distance of an n-step row from π."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if np.all(chain.transition == chain.transition[0]):
        return 0.0
    pi = chain.stationary()
    Pn = np.linalg.matrix_power(chain.transition, n)
    return float(np.clip(0.5 * np.abs(Pn - pi).sum(axis=1).max(), 0.0, 1.0))


def estimate_phi(traj, n_list: Sequence[int], depth: int = 1, min_count: int = 50) -> Dict[int, Tuple[float, float, float]]:
    """Plug-in estimate of φ(n) over cylinder events of length ``depth``.

    Conditioning events are past words of length ``depth`` ending at time i,
    target events are future words of length ``depth`` starting at i + n.
    Words seen fewer than ``min_count`` times are skipped. Returned tuples are
    (estimate, lower, upper) with a crude 3σ band from the rarest conditioning
    word used.
    """
    x = np.asarray(traj)
    _, codes = np.unique(x, return_inverse=True)
    base = int(codes.max()) + 1
    T = codes.size
    words = np.zeros(T - depth + 1, dtype=np.int64)
    for j in range(depth):
        words = words * base + codes[j:T - depth + 1 + j]
    out = {}
    for n in n_list:
        past = words[: words.size - (n + depth - 1)]
        fut = words[n + depth - 1:]
        m = min(past.size, fut.size)
        past, fut = past[:m], fut[:m]
        fvals, finv = np.unique(fut, return_inverse=True)
        pB = np.bincount(finv, minlength=fvals.size) / m
        best, worst_count = 0.0, m
        for a in np.unique(past):
            sel = past == a
            cnt = int(sel.sum())
            if cnt < min_count:
                continue
            pBA = np.bincount(finv[sel], minlength=fvals.size) / cnt
            # sup over events B is half the L1 distance
            val = 0.5 * np.abs(pBA - pB).sum()
            if val > best:
                best, worst_count = val, cnt
        half = 3.0 / np.sqrt(worst_count)
        out[int(n)] = (float(best), float(max(best - half, 0.0)), float(min(best + half, 1.0)))
    return out


# --------------------------------------------------------------------------
# Bernoulli-shift functionals
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BernoulliFunctional:
    """X_n = g(ε_{n-J}, ..., ε_{n+J}) for an iid sequence ε.

    Parameters
    ----------
    weights : array_like, length 2J+1
        Coefficients a_j for j = -J..J.
    alphabet, probs : array_like, optional
        Finite base law. Ignored when ``real_dist`` is given.
    real_dist : {"normal", "uniform"}, optional
        Continuous base law (standard normal or uniform on [-1, 1]).
    g : {"linear", "tanh", "sign"} or callable
        ``"linear"`` is Σ a_j ε_{n+j}; ``"tanh"`` and ``"sign"`` post-compose it.
        A callable receives the window array with last axis of length 2J+1.
    """

    weights: np.ndarray
    alphabet: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    real_dist: Optional[str] = None
    g: Union[str, Callable[[np.ndarray], np.ndarray]] = "linear"

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size % 2 != 1:
            raise ValidationError("weights must have odd length 2J+1")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.real_dist is None:
            if self.alphabet is None:
                raise ValidationError("need alphabet or real_dist")
            a = np.array(self.alphabet, dtype=float)
            p = np.full(a.size, 1.0 / a.size) if self.probs is None else np.array(self.probs, dtype=float)
            if p.shape != a.shape or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValidationError("probs must be a probability vector matching alphabet")
            object.__setattr__(self, "alphabet", a)
            object.__setattr__(self, "probs", p)
        elif self.real_dist not in ("normal", "uniform"):
            raise ValidationError(f"unknown real_dist {self.real_dist!r}")
        if isinstance(self.g, str) and self.g not in ("linear", "tanh", "sign"):
            raise ValidationError(f"unknown g rule {self.g!r}")

    @property
    def J(self) -> int:
        return self.weights.size // 2

    @property
    def finite(self) -> bool:
        return self.real_dist is None

    def evaluate(self, window: np.ndarray) -> np.ndarray:
        if callable(self.g):
            return np.asarray(self.g(window), dtype=float)
        lin = window @ self.weights
        if self.g == "linear":
            return lin
        if self.g == "tanh":
            return np.tanh(lin)
        return np.sign(lin)

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.real_dist == "normal":
            return rng.standard_normal(size)
        if self.real_dist == "uniform":
            return rng.uniform(-1.0, 1.0, size)
        return self.alphabet[rng.choice(self.alphabet.size, size=size, p=self.probs)]

    def noise(self, seed: int, copy: int, idx) -> np.ndarray:
        """Noise values at integer times ``idx`` from stream ``copy``.

        Values are keyed by (seed, copy, block of the index), so the value at a
        given time never depends on which other times were requested.
        """
        idx = np.asarray(idx, dtype=np.int64)
        shifted = idx + _INDEX_OFFSET
        blocks = shifted // _NOISE_BLOCK
        out = np.empty(idx.shape, dtype=float)
        for b in np.unique(blocks):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(copy), int(b)]))
            vals = self.draw(rng, _NOISE_BLOCK)
            sel = blocks == b
            out[sel] = vals[shifted[sel] % _NOISE_BLOCK]
        return out

    def stationary_law(self, max_atoms: int = 2**16) -> Tuple[np.ndarray, np.ndarray]:
        """Exact marginal law by enumeration of the window (finite alphabets)."""
        if not self.finite:
            raise ValidationError("continuous base law has no atom list")
        L = self.weights.size
        if self.alphabet.size ** L > max_atoms:
            raise ValidationError("window too large to enumerate")
        combos = np.array(list(product(range(self.alphabet.size), repeat=L)))
        vals = self.evaluate(self.alphabet[combos])
        wts = np.prod(self.probs[combos], axis=1)
        atoms, inv = np.unique(vals, return_inverse=True)
        return atoms, np.bincount(inv.ravel(), weights=wts, minlength=atoms.size)

    def sample_at(self, indices, n_paths: int, rng: np.random.Generator) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1 or (idx.size > 1 and np.any(np.diff(idx) <= 0)):
            raise ValidationError("indices must be strictly increasing")
        J = self.J
        offs = np.arange(-J, J + 1)
        support = np.unique((idx[:, None] + offs[None, :]).ravel())
        eps = self.draw(rng, (n_paths, support.size))
        pos = np.searchsorted(support, idx[:, None] + offs[None, :])
        return self.evaluate(eps[:, pos])


@dataclass
class CoupledTrajectory:
    """Primary path X_1..X_N with coupled approximants X_{n,r}."""

    primary: np.ndarray
    approximants: Dict[int, np.ndarray]
    metric: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(default=lambda a, b: np.abs(a - b))
    seed: Optional[int] = None

    def distances(self, r: int) -> np.ndarray:
        if r not in self.approximants:
            raise ValidationError(f"no approximant for r={r}")
        return self.metric(self.primary, self.approximants[r])


def build_bernoulli(bf: BernoulliFunctional, n_steps: int, r_list: Sequence[int], seed: int,
                    main_noise: Optional[np.ndarray] = None) -> CoupledTrajectory:
    """Simulate X_1..X_N and the coupled approximants X_{n,r}.

    X_{n,r} keeps the shared noise ε_k for |k - n| <= r and uses the copy
    ε^{(n)}_k (stream ``n``) elsewhere in the window.

    ``main_noise`` (length N + 2J, covering times 1-J .. N+J) overrides the
    shared stream; it is used to check window locality.
    """
    if len(r_list) == 0:
        raise ValidationError("r_list must be non-empty")
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    if any(int(r) < 0 for r in r_list):
        raise ValidationError("r values must be >= 0")
    J = bf.J
    times = np.arange(1 - J, n_steps + J + 1)
    eps = bf.noise(seed, 0, times) if main_noise is None else np.asarray(main_noise, dtype=float)
    if eps.shape != times.shape:
        raise ValidationError("main_noise has the wrong length")
    offs = np.arange(-J, J + 1)
    win_pos = np.arange(n_steps)[:, None] + (offs + J)[None, :]
    windows = eps[win_pos]
    primary = bf.evaluate(windows)
    copies = np.empty_like(windows)
    for n in range(1, n_steps + 1):
        copies[n - 1] = bf.noise(seed, n, n + offs)
    approx = {}
    for r in sorted({int(r) for r in r_list}):
        inside = np.abs(offs) <= r
        mixed = np.where(inside[None, :], windows, copies)
        approx[r] = bf.evaluate(mixed)
    return CoupledTrajectory(primary=primary, approximants=approx, seed=seed)


@dataclass
class MixingReport:
    """φ and β estimates with a decay fit."""

    phi: Dict[int, Tuple[float, float, float]] = field(default_factory=dict)
    beta: Dict[Tuple[float, int], Tuple[float, float, float]] = field(default_factory=dict)
    fit: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "phi": {str(n): list(v) for n, v in sorted(self.phi.items())},
            "beta": [{"p": p, "r": r, "estimate": v[0], "lower": v[1], "upper": v[2]}
                     for (p, r), v in sorted(self.beta.items())],
            "fit": self.fit,
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def _decay_fit(rs: np.ndarray, vals: np.ndarray) -> Dict[str, float]:
    """Power-law vs exponential fit on the positive part of a decreasing profile."""
    pos = vals > 0
    if pos.sum() < 2:
        return {"model": "vanishing", "c": float(vals.max(initial=0.0)), "theta": float("inf"),
                "rate": float("inf"), "residual": 0.0}
    r, y = rs[pos].astype(float), np.log(vals[pos])
    A_exp = np.vstack([np.ones_like(r), -r]).T
    coef_e, res_e, *_ = np.linalg.lstsq(A_exp, y, rcond=None)
    sse_e = float(np.sum((A_exp @ coef_e - y) ** 2))
    r1 = np.maximum(r, 1.0)
    A_pow = np.vstack([np.ones_like(r1), -np.log(r1)]).T
    coef_p, *_ = np.linalg.lstsq(A_pow, y, rcond=None)
    sse_p = float(np.sum((A_pow @ coef_p - y) ** 2))
    if sse_e <= sse_p:
        return {"model": "exponential", "c": float(np.exp(coef_e[0])), "theta": float("inf"),
                "rate": float(coef_e[1]), "residual": sse_e}
    return {"model": "power", "c": float(np.exp(coef_p[0])), "theta": float(coef_p[1]),
            "rate": 0.0, "residual": sse_p}


def estimate_beta(traj: CoupledTrajectory, p: float, r_list: Optional[Sequence[int]] = None) -> MixingReport:
    """Estimate β_p(r) as the coupling bound ‖d(X_n, X_{n,r})‖_p.

    The process is stationary, so the sup over n is estimated by pooling all
    n. CIs are 3σ bands on the mean of d^p mapped through x ↦ x^{1/p}.
    ``fit["theta"]`` is ``inf`` when the exponential model fits better.
    """
    if p < 1:
        raise ValidationError("p must be >= 1")
    rs = sorted(traj.approximants) if r_list is None else [int(r) for r in r_list]
    report = MixingReport()
    ests = []
    for r in rs:
        d = traj.distances(r) ** p
        m = float(d.mean())
        se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
        est = m ** (1.0 / p)
        report.beta[(float(p), r)] = (est, max(m - 3 * se, 0.0) ** (1.0 / p), (m + 3 * se) ** (1.0 / p))
        ests.append(est)
    report.fit = _decay_fit(np.array(rs), np.array(ests))
    return report


def beta_exact(bf: BernoulliFunctional, r: int, p: float, max_atoms: int = 2**20) -> float:
    """‖X_n − X_{n,r}‖_p by exhaustive enumeration (finite alphabets)."""
    if not bf.finite:
        raise ValidationError("enumeration needs a finite alphabet")
    L = bf.weights.size
    offs = np.arange(-bf.J, bf.J + 1)
    outside = np.flatnonzero(np.abs(offs) > r)
    m = bf.alphabet.size
    if m ** (L + outside.size) > max_atoms:
        raise ValidationError("enumeration too large")
    combos = np.array(list(product(range(m), repeat=L + outside.size)), dtype=np.int64)
    main = combos[:, :L]
    alt = main.copy()
    alt[:, outside] = combos[:, L:]
    wts = np.prod(bf.probs[combos], axis=1)
    d = np.abs(bf.evaluate(bf.alphabet[main]) - bf.evaluate(bf.alphabet[alt])) ** p
    return float(np.dot(wts, d) ** (1.0 / p))


def phi_report(chain: FiniteChain, n_list: Sequence[int]) -> MixingReport:
    """Exact φ(n) for a finite chain with an exponential decay fit."""
    rep = MixingReport()
    vals = []
    for n in n_list:
        v = phi_exact(chain, int(n))
        rep.phi[int(n)] = (v, v, v)
        vals.append(v)
    rep.fit = _decay_fit(np.array(n_list), np.array(vals))
    return rep


# --------------------------------------------------------------------------
# Config and export
# --------------------------------------------------------------------------


def model_from_config(spec: Mapping):
    """Build a process model from a JSON-compatible mapping.

    Supported ``kind`` values: ``"chain"`` (``transition``, optional
    ``values``), ``"iid"`` (``probs``, optional ``values``), ``"two_state"``
    (``p``, ``q``) and ``"bernoulli"`` (``weights`` plus ``alphabet``/``probs``
    or ``real_dist``, and ``g``).
    """
    kind = spec.get("kind")
    if kind == "chain":
        return FiniteChain(np.array(spec["transition"], dtype=float), values=spec.get("values"))
    if kind == "iid":
        return iid_chain(spec["probs"], values=spec.get("values"))
    if kind == "two_state":
        return two_state_chain(float(spec["p"]), float(spec["q"]), values=spec.get("values"))
    if kind == "bernoulli":
        weights = spec.get("weights")
        if weights is None and "geometric" in spec:
            J = int(spec.get("J", 20))
            rho = float(spec["geometric"])
            weights = [rho ** abs(j) for j in range(-J, J + 1)]
        return BernoulliFunctional(weights=np.array(weights, dtype=float), alphabet=spec.get("alphabet"),
                                   probs=spec.get("probs"), real_dist=spec.get("real_dist"),
                                   g=spec.get("g", "linear"))
    raise ValidationError(f"unknown process kind {kind!r}")


def export_trajectory(values, path: str) -> None:
    """Write a trajectory as ``.npy`` (binary column) or ``.csv``."""
    arr = np.asarray(values)
    if str(path).endswith(".npy"):
        np.save(path, arr)
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "value"])
        for i, v in enumerate(arr, start=1):
            w.writerow([i, repr(v.item() if hasattr(v, "item") else v)])
