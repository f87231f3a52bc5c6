"""Transfer operators on a discretized tower and their twisted versions.

All operators act on cell-value vectors (or batches with cells on axis 0).
A twisted operator is stored as a one-step base operator B, a composition
power ``step`` and a multiplier e^{...} applied before the power, so
``apply`` computes B^step(mult · g) by repeated sparse products.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse

from .errors import ConvergenceError, ValidationError
from .tower_core import Tower, tower_map

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Observables on the tower
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TowerObservable:
    """G on Δ^ℓ given on cells: ``func(c_1, ..., c_ℓ)`` with broadcasting."""

    ell: int
    func: Callable[..., np.ndarray]
    integer_valued: bool = False

    def __call__(self, *cells):
        return np.asarray(self.func(*cells), dtype=float)

    def last_slot(self, tower: Tower, xbar: Sequence[int]) -> np.ndarray:
        """x ↦ G(x̄, x) on all cells."""
        if len(xbar) != self.ell - 1:
            raise ValidationError(f"x̄ must have {self.ell - 1} entries")
        allc = np.arange(tower.n_cells)
        args = [np.full(tower.n_cells, int(c)) for c in xbar] + [allc]
        return np.broadcast_to(self(*args), (tower.n_cells,)).astype(float)

    def centered_last(self, tower: Tower, xbar: Sequence[int]) -> np.ndarray:
        """G_ℓ(x̄, ·) = G(x̄, ·) − ∫G(x̄, y) dμ(y)."""
        vals = self.last_slot(tower, xbar)
        return vals - np.dot(tower.mu, vals)


def indicator_product(tower: Tower, cells_mask: np.ndarray, ell: int = 2) -> TowerObservable:
    """G(x_1..x_ℓ) = Π 1_A(x_i) for a set A of cells."""
    A = np.asarray(cells_mask, dtype=float)
    return TowerObservable(ell, lambda *c: np.prod([A[ci] for ci in c], axis=0), integer_valued=True)


def golden_observable(tower: Tower) -> TowerObservable:
    """Indicator product over the base part of branch 0 (integer valued, ℓ = 2)."""
    return indicator_product(tower, (tower.floor == 0) & (tower.branch == 0), ell=2)


# --------------------------------------------------------------------------
# Operator handles
# --------------------------------------------------------------------------


@dataclass
class OperatorHandle:
    """B^step(mult · g) with B sparse; ``mult`` may be None (untwisted)."""

    kind: str
    base: sparse.csr_matrix
    step: int = 1
    mult: Optional[np.ndarray] = None
    params: Dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.base.shape[0]

    def apply(self, g):
        g = np.asarray(g)
        if g.shape[0] != self.n:
            raise ValidationError(f"dimension mismatch: {g.shape[0]} vs {self.n}")
        out = g if self.mult is None else (self.mult.reshape((-1,) + (1,) * (g.ndim - 1)) * g)
        for _ in range(self.step):
            out = self.base @ out
        return out

    def dense(self) -> np.ndarray:
        if self.n > 5000:
            raise ValidationError("dense form limited to 5000 cells")
        M = self.base.toarray()
        out = np.linalg.matrix_power(M, self.step)
        if self.mult is not None:
            out = out * self.mult[None, :]
        return out


@dataclass
class ComposedOperator:
    """Product op_{N-1} ∘ ... ∘ op_0 (first element acts first)."""

    ops: List[OperatorHandle]

    @property
    def n(self) -> int:
        return self.ops[0].n

    def apply(self, g):
        for op in self.ops:
            g = op.apply(g)
        return g

    def dense(self) -> np.ndarray:
        M = np.eye(self.n, dtype=complex)
        for op in self.ops:
            M = op.dense() @ M
        return M


def apply(op, g):
    """Apply an operator handle (or composition) to a cell function."""
    return op.apply(g)


def transfer(tower: Tower) -> OperatorHandle:
    return OperatorHandle("P", tower.P)


def normalized(tower: Tower) -> OperatorHandle:
    """𝒜 g = P(g h₀)/h₀."""
    h0 = tower.h0
    A = sparse.diags(1.0 / h0) @ tower.P @ sparse.diags(h0)
    return OperatorHandle("A_normalized", sparse.csr_matrix(A))


def weighted(tower: Tower) -> OperatorHandle:
    """L g = P(g v)/v."""
    L = sparse.diags(1.0 / tower.v) @ tower.P @ sparse.diags(tower.v)
    return OperatorHandle("L_weighted", sparse.csr_matrix(L))


def twisted(tower: Tower, t: float, xbar: Sequence[int], G: TowerObservable) -> OperatorHandle:
    """R_{it,x̄} = 𝒜^ℓ(e^{itG_ℓ(x̄,·)} ·)."""
    u = G.centered_last(tower, xbar)
    A = normalized(tower)
    return OperatorHandle("R_twisted", A.base, step=G.ell, mult=np.exp(1j * t * u),
                          params={"t": float(t), "xbar": [int(c) for c in xbar]})


def p_twisted(tower: Tower, t: float, a: Sequence[int], G: TowerObservable) -> OperatorHandle:
    """P_{it}^a g = P^ℓ(g e^{it u_a}) with u_a = G_ℓ(a, ·)."""
    u = G.centered_last(tower, a)
    return OperatorHandle("P_twisted", tower.P, step=G.ell, mult=np.exp(1j * t * u),
                          params={"t": float(t), "a": [int(c) for c in a]})


def p_twisted_sequence(tower: Tower, t: float, env: Sequence[Sequence[int]], G: TowerObservable) -> ComposedOperator:
    """P_{it}^{ȳ₀,N} = P_{it}^{ȳ_{N-1}} ∘ ... ∘ P_{it}^{ȳ_0}."""
    return ComposedOperator([p_twisted(tower, t, a, G) for a in env])


def l_z(tower: Tower, z: complex, u: np.ndarray, step: int) -> OperatorHandle:
    """ℒ_z^ω g = L^{step}(e^{z u_ω} g)."""
    L = weighted(tower)
    return OperatorHandle("L_z", L.base, step=step, mult=np.exp(z * np.asarray(u)), params={"z": complex(z)})


def weighted_norms(tower: Tower, g):
    """(‖g‖_s, ‖g‖_h, ‖g‖_W)."""
    return tower.weighted_norms(g)


def sample_environment(tower: Tower, ell: int, n: int, seed: int) -> List[Tuple[int, ...]]:
    """n points of Δ^{ℓ-1} drawn cell-wise from μ^{ℓ-1}."""
    rng = np.random.default_rng(seed)
    cells = rng.choice(tower.n_cells, size=(n, ell - 1), p=tower.mu / tower.mu.sum())
    return [tuple(int(c) for c in row) for row in cells]


# --------------------------------------------------------------------------
# Lasota–Yorke verification
# --------------------------------------------------------------------------


@dataclass
class LYConstants:
    A: float
    Q: float
    C1: float
    C2: float
    fitted_on: int = 0

    def as_dict(self):
        return {"A": self.A, "Q": self.Q, "C1": self.C1, "C2": self.C2, "fitted_on": self.fitted_on}


@dataclass
class LYReport:
    """Outcome of the four inequalities for one (env, t, N, k) and a battery of g."""

    case: str
    N: int
    k: int
    t: float
    lhs: Dict[str, np.ndarray]
    rhs: Dict[str, np.ndarray]
    constants: LYConstants
    passed: Dict[str, bool]

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def slack(self) -> Dict[str, float]:
        return {key: float(np.min(self.rhs[key] * (1 + 1e-9) - self.lhs[key])) for key in self.lhs}


def lip_u_constant(tower: Tower, G: TowerObservable, envs: Optional[Sequence[Sequence[int]]] = None) -> float:
    """A = (1-β)^{-1} sup_a sup_s |u_a|_{β,Δ_s}; sup over all cells a when ``envs`` is None."""
    if G.ell == 1:
        u = G.centered_last(tower, ())[:, None]
    else:
        if envs is None:
            if G.ell > 2:
                raise ValidationError("pass envs explicitly when ℓ > 2")
            envs = [(c,) for c in range(tower.n_cells)]
        u = np.stack([G.centered_last(tower, a) for a in envs], axis=1)
    return float(np.max(tower.lip(u)) / (1.0 - tower.beta))


class LasotaYorke:
    """Evaluator of the two-case Lasota–Yorke inequalities along an environment.

    Each twisted step is P^ℓ, so after N steps the total number of tower
    iterates is n = ℓN; the case split and the exponents use n.
    """

    def __init__(self, tower: Tower, G: TowerObservable, env: Sequence[Sequence[int]], A: Optional[float] = None):
        self.tower = tower
        self.G = G
        self.env = list(env)
        self.A = lip_u_constant(tower, G) if A is None else float(A)
        self.floors = range(tower.R_max)

    def trajectories(self, t: float, g: np.ndarray, N_max: int):
        """Yield (N, P_it^{ȳ₀,N} g) for N = 1..N_max."""
        if len(self.env) < N_max:
            raise ValidationError("environment shorter than N_max")
        cur = np.asarray(g, dtype=complex)
        for N in range(1, N_max + 1):
            cur = p_twisted(self.tower, t, self.env[N - 1], self.G).apply(cur)
            yield N, cur

    def raw(self, t: float, g: np.ndarray, N_max: int):
        """Per (N, k): sup |·| and Lip on floor k for the batch, plus norms of g."""
        tw = self.tower
        s, hn, _ = tw.weighted_norms(g)
        l1 = tw.integral(np.abs(g), "m")
        table = {}
        for N, gN in self.trajectories(t, g, N_max):
            for k in self.floors:
                cells = tw.floor_cells[k]
                table[(N, k)] = (np.abs(gN[cells]).max(axis=0), tw.lip_floor(gN, k))
        return s, hn, l1, table

    def fit(self, t_list: Sequence[float], battery: np.ndarray, N_max: int) -> LYConstants:
        """Fit Q and C1 (with C2 = 0) as the largest ratios over a training battery."""
        tw = self.tower
        beta = tw.beta
        Q = 0.0
        ratio_c1 = 0.0
        raws = [(t, self.raw(t, battery, N_max)) for t in t_list]
        for t, (s, hn, l1, table) in raws:
            for (N, k), (sup, lip) in table.items():
                if self.G.ell * N > k:
                    Q = max(Q, float(np.max(sup / l1)))
        Q *= 1.0 + 1e-12
        for t, (s, hn, l1, table) in raws:
            for (N, k), (sup, lip) in table.items():
                if self.G.ell * N > k:
                    c = np.max(lip / (Q * l1)) - 2.0 / beta - abs(t) * self.A
                    ratio_c1 = max(ratio_c1, float(c))
        C1 = ratio_c1 * (1.0 + 1e-12) + 1e-12
        return LYConstants(A=self.A, Q=Q, C1=C1, C2=0.0, fitted_on=battery.shape[1])

    def verify(self, t: float, g: np.ndarray, N_max: int, const: LYConstants) -> List[LYReport]:
        """Evaluate all four inequalities for N = 1..N_max and every floor k."""
        tw = self.tower
        beta, p = tw.beta, tw.p
        s, hn, l1, table = self.raw(t, g, N_max)
        reports = []
        for (N, k), (sup, lip) in sorted(table.items()):
            n = self.G.ell * N
            if n <= k:
                scale = np.exp((k - n) * p / 2.0)
                lhs = {"LY1.1": sup, "LY1.2": lip}
                rhs = {"LY1.1": scale * s,
                       "LY1.2": (hn * beta ** n + (self.A * abs(t) + 2.0 / beta) * s) * scale}
                case = "N<=k"
            else:
                RN = const.Q * (l1 + beta ** n * hn * const.C2)
                lhs = {"LY2.1": sup, "LY2.2": lip}
                rhs = {"LY2.1": RN, "LY2.2": (const.C1 + 2.0 / beta + abs(t) * self.A) * RN}
                case = "N>k"
            passed = {key: bool(np.all(lhs[key] <= rhs[key] * (1 + 1e-9) + 1e-300)) for key in lhs}
            reports.append(LYReport(case, N, k, float(t), lhs, rhs, const, passed))
        return reports

    def norm_bound(self, t: float, g: np.ndarray, N: int, const: LYConstants) -> Tuple[np.ndarray, np.ndarray]:
        """(‖P^N g‖_W, the closing bound max(e^{-np/2}(...), R_N(g)(2 + C1 + |t|A)))."""
        tw = self.tower
        n = self.G.ell * N
        gN = None
        for M, cur in self.trajectories(t, g, N):
            gN = cur
        s, hn, _ = tw.weighted_norms(g)
        l1 = tw.integral(np.abs(g), "m")
        RN = const.Q * (l1 + tw.beta ** n * hn * const.C2)
        bound = np.maximum(np.exp(-n * tw.p / 2.0) * ((1 + self.A * abs(t)) * s + tw.beta ** n * hn),
                           RN * (2 + const.C1 + abs(t) * self.A))
        return tw.weighted_norms(gN)[2], bound


def verify_lasota_yorke(tower: Tower, G: TowerObservable, env, t: float, N: int, k: int, g,
                        constants: Optional[LYConstants] = None, auto_fit: bool = True,
                        training: Optional[np.ndarray] = None) -> LYReport:
    """Check the inequalities at a single (N, k) for a function or batch ``g``.

    Constants are fitted on ``training`` (default: all cell indicators plus
    32 random functions) when not supplied.
    """
    ly = LasotaYorke(tower, G, env)
    g = np.asarray(g)
    if g.ndim == 1:
        g = g[:, None]
    if constants is None:
        if not auto_fit:
            raise ValidationError("Lasota–Yorke constants missing and auto-fit disabled")
        if training is None:
            training = training_battery(tower, 32, seed=12345)
        constants = ly.fit([t], training, N)
    for rep in ly.verify(t, g, N, constants):
        if rep.N == N and rep.k == k:
            return rep
    raise ValidationError(f"floor {k} not present on this tower")


def random_battery(tower: Tower, n: int, seed: int, complex_valued: bool = True) -> np.ndarray:
    """Mix of smooth-ish and rough random functions, scaled by v so ‖·‖_s is O(1)."""
    rng = np.random.default_rng(seed)
    cols = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            f = rng.standard_normal(tower.n_cells)
        elif kind == 1:
            coarse = rng.standard_normal((tower.R_max, tower.J))
            f = coarse[tower.floor, tower.branch] + 0.1 * rng.standard_normal(tower.n_cells)
        else:
            f = np.sin(rng.uniform(0.5, 6.0) * tower.midpoints() + rng.uniform(0, 6.3)) + 0.3 * tower.floor
        if complex_valued:
            f = f + 1j * rng.standard_normal(tower.n_cells) * (kind != 2)
        cols.append(f * tower.v * rng.uniform(0.2, 2.0))
    return np.stack(cols, axis=1)


def training_battery(tower: Tower, n_random: int, seed: int) -> np.ndarray:
    """All cell indicators (the extremal functions for the L¹ bounds) plus random functions."""
    return np.concatenate([np.eye(tower.n_cells, dtype=complex), random_battery(tower, n_random, seed)], axis=1)


# --------------------------------------------------------------------------
# RPF triplets for random products
# --------------------------------------------------------------------------


@dataclass
class RPFTriplet:
    """Leading data of a product of ℒ_z operators along a fixed environment.

    ``lam[j]`` is λ_{θ^j ω}(z); ``log_lambda`` is Π_{ω,n}(z) = Σ_j log λ_j.
    ``h`` and ``nu`` are h_ω^{(z)} and the weights of ν_ω^{(z)} at the
    first environment index; ``h_end`` is h_{θ^n ω}^{(z)}.
    """

    z: complex
    lam: np.ndarray
    h: np.ndarray
    nu: np.ndarray
    h_end: np.ndarray
    delta: float
    remainder: np.ndarray
    residual: float

    @property
    def lambda_(self) -> complex:
        return complex(self.lam[0])

    @property
    def log_lambda(self) -> complex:
        return complex(np.sum(np.log(self.lam)))


def rpf_iterate(tower: Tower, z: complex, us: Sequence[np.ndarray], step: int, n: int,
                burn: int = 40, tol: float = 1e-13, check_decay: bool = True) -> RPFTriplet:
    """Sequential RPF data for ℒ_z^{ω_j} g = L^{step}(e^{z u_j} g).

    ``us`` has length ``burn + n + burn``; ω_0 is ``us[burn]``. The forward
    pass runs from h/v through the first ``burn`` operators, the dual pass
    runs backwards from m_L through the last ``burn``. Normalizations follow
    ν_ω(h^{(0)}) = 1 and ν_ω(h_ω) = 1, and λ_ω = ν_{θω}(ℒ_ω h_ω).
    """
    if len(us) < 2 * burn + n:
        raise ValidationError("environment too short for burn-in")
    L = weighted(tower).base
    ops = [OperatorHandle("L_z", L, step=step, mult=np.exp(z * np.asarray(u))) for u in us]
    h_ref = tower.h0 / tower.v
    mL = tower.m  # weights of m_L = v dm₀
    total = burn + n + burn
    # forward: directions of h_j for j = 0..burn+n
    f = h_ref.astype(complex)
    hs = {}
    for j in range(burn + n + 1):
        if j >= burn:
            hs[j - burn] = f.copy()
        if j < burn + n:
            f = ops[j].apply(f)
            f = f / np.dot(mL, f)
    # dual: weights of ν_j for j = n..0 (relative to ω_0)
    wgt = mL.astype(complex)
    for j in range(total - 1, burn + n - 1, -1):
        wgt = _dual(ops[j], wgt)
        wgt = wgt / np.dot(wgt, h_ref)
    nus = {n: wgt.copy()}
    for j in range(burn + n - 1, burn - 1, -1):
        wgt = _dual(ops[j], wgt)
        wgt = wgt / np.dot(wgt, h_ref)
        nus[j - burn] = wgt.copy()
    hn = {j: hs[j] / np.dot(nus[j], hs[j]) for j in hs}
    lam = np.array([np.dot(nus[j + 1], ops[burn + j].apply(hn[j])) for j in range(n)])
    resid = max(float(np.max(np.abs(ops[burn + j].apply(hn[j]) - lam[j] * hn[j + 1])) /
                      max(float(np.max(np.abs(hn[j + 1]))), 1e-300)) for j in range(n))
    # rank-one remainder along the product
    rng = np.random.default_rng(0)
    V = rng.standard_normal((tower.n_cells, 6)) * h_ref[:, None]
    cur = V.astype(complex)
    lam_acc = 1.0 + 0j
    rem = np.empty(n)
    proj0 = nus[0] @ V
    for j in range(n):
        cur = ops[burn + j].apply(cur)
        lam_acc *= lam[j]
        E = cur / lam_acc - np.outer(hn[j + 1], proj0)
        rem[j] = float(np.max(np.abs(E)) / np.max(np.abs(V)))
    delta = _decay_rate(rem, tol)
    if check_decay and not (delta < 1.0):
        raise ConvergenceError(f"no geometric collapse of the remainder (fitted δ = {delta:.3f})",
                               residual=float(rem[-1]))
    return RPFTriplet(z=complex(z), lam=lam, h=hn[0], nu=nus[0], h_end=hn[n], delta=delta,
                      remainder=rem, residual=resid)


def _dual(op: OperatorHandle, w: np.ndarray) -> np.ndarray:
    """Weights of the functional g ↦ w · op(g)."""
    for _ in range(op.step):
        w = op.base.T @ w
    return w * op.mult if op.mult is not None else w


def _decay_rate(rem: np.ndarray, floor: float) -> float:
    """Geometric rate of a remainder profile, fitted above the rounding floor."""
    ok = np.flatnonzero(rem > max(floor, 1e-12))
    if ok.size == 0:
        return 0.0
    if ok.size < 3:
        # collapses to rounding level within a few steps
        last = ok[-1] + 1
        return float(min(max(rem[ok[0]], 1e-16) ** (1.0 / last), 0.999))
    x = ok.astype(float)
    slope = np.polyfit(x, np.log(rem[ok]), 1)[0]
    return float(np.exp(slope))


def pressure(tower: Tower, z: complex, us, step: int, n: int, burn: int = 40) -> complex:
    """Π_{ω,n}(z) = Σ_{j<n} log λ_{θ^j ω}(z)."""
    return rpf_iterate(tower, z, us, step, n, burn=burn, check_decay=False).log_lambda


def exact_variance(tower: Tower, us: Sequence[np.ndarray], step: int) -> Tuple[float, float]:
    """Mean and variance of S_n = Σ_j u_j ∘ F^{step·j} under μ, through the operator.

    Uses E[u_i · u_j∘F^m] = ∫ P^m(u_i h₀) u_j dm₀; exact for affine towers
    where P is exact on cell functions.
    """
    h0, m0 = tower.h0, tower.m0
    acc = np.zeros(tower.n_cells)
    mean = 0.0
    second = 0.0
    for u in us:
        u = np.asarray(u, dtype=float)
        for _ in range(step):
            acc = tower.P @ acc
        mean += float(np.dot(m0, u * h0))
        second += float(np.dot(m0, u * (2.0 * acc + u * h0)))
        acc = acc + u * h0
    return mean, second - mean ** 2


def sample_orbit_cells(tower: Tower, n_steps: int, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """Cells visited by F-orbits of μ-distributed points (affine towers only).

    For affine full branches μ = m₀ and the base coordinate's symbols are iid
    with law (w_j), so orbits are simulated exactly in symbolic form.
    Returns an array of shape (n_paths, n_steps + 1).
    """
    if not tower.affine:
        raise ValidationError("exact orbit sampling needs affine branches")
    J, D = tower.J, tower.D
    # initial (floor, branch) with probability ∝ w_j for each floor below R_j
    pairs = [(k, j) for j in range(J) for k in range(int(tower.R[j]))]
    probs = np.array([tower.w[j] for k, j in pairs])
    probs /= probs.sum()
    choice = rng.choice(len(pairs), size=n_paths, p=probs)
    floor = np.array([pairs[c][0] for c in range(len(pairs))])[choice]
    first = np.array([pairs[c][1] for c in range(len(pairs))])[choice]
    L = D + n_steps + 1
    syms = rng.choice(J, size=(n_paths, L), p=tower.w)
    syms[:, 0] = first
    code = np.zeros(n_paths, dtype=np.int64)
    for i in range(D):
        code = code * J + syms[:, i]
    pos = np.zeros(n_paths, dtype=np.int64)
    rows = np.arange(n_paths)
    out = np.empty((n_paths, n_steps + 1), dtype=np.int64)
    top = J ** (D - 1)
    for s in range(n_steps + 1):
        out[:, s] = tower.index[floor, code]
        if s == n_steps:
            break
        lead = syms[rows, pos]
        ret = tower.R[lead] == floor + 1
        floor = np.where(ret, 0, floor + 1)
        nxt = syms[rows, np.minimum(pos + D, L - 1)]
        code = np.where(ret, (code % top) * J + nxt, code)
        pos = pos + ret
    return out


# --------------------------------------------------------------------------
# Spectral probes and the periodic-orbit observable
# --------------------------------------------------------------------------


def spectral_radius(op, probes: int = 8, n_power: int = 60, seed: int = 0) -> Dict:
    """Dominant eigenvalue modulus by dense eigen-solve plus a power/norm-growth fit."""
    M = op.dense()
    ev = linalg.eigvals(M)
    mods = np.sort(np.abs(ev))[::-1]
    radius = float(mods[0])
    gap = float(mods[0] - mods[1]) if mods.size > 1 else radius
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((M.shape[0], probes)) + 0j
    norms = []
    for _ in range(n_power):
        V = M @ V
        nv = np.max(np.abs(V))
        norms.append(nv)
        if nv == 0:
            break
        V = V / nv
    logs = np.cumsum(np.log(np.maximum(norms, 1e-300)))
    half = len(logs) // 2
    growth = float(np.exp((logs[-1] - logs[half - 1]) / (len(logs) - half))) if half >= 1 else radius
    return {"radius": radius, "gap": gap, "norm_growth_fit": growth, "second": float(mods[1]) if mods.size > 1 else 0.0}


def _orbit_cell(tower: Tower, point: Tuple[float, int], steps: int) -> int:
    x, k = point
    x, k = np.asarray(x, dtype=float), np.asarray(k)
    for _ in range(steps):
        x, k = tower_map(tower, x, k)
    return int(tower.locate(x, k)[0])


def periodic_observable(tower: Tower, G: TowerObservable, x0: Tuple[float, int], n0: int,
                        period_tol: float = 1e-9) -> np.ndarray:
    """G_{x₀,n₀}(x) = Σ_{k<n₀} G(F^k x₀, F^{2k} x₀, ..., F^{ℓk} x) on cells.

    The last slot is evaluated at the image of each cell's midpoint; this is
    exact when n₀ = 1 and a cell-resolution approximation otherwise.
    """
    xb, xk = x0
    yb, yk = np.asarray(xb, dtype=float), np.asarray(xk)
    for _ in range(n0):
        yb, yk = tower_map(tower, yb, yk)
    if int(yk) != int(xk) or abs(float(yb) - float(xb)) > period_tol:
        raise ValidationError("x₀ is not periodic with the given period")
    ell = G.ell
    total = np.zeros(tower.n_cells)
    mids = tower.midpoints()
    for k in range(n0):
        fixed = [_orbit_cell(tower, x0, i * k) for i in range(1, ell)]
        if k == 0:
            last = np.arange(tower.n_cells)
        else:
            xs, ks = mids.copy(), tower.floor.copy()
            for _ in range(ell * k):
                xs, ks = tower_map(tower, xs, ks)
            last = tower.locate(xs, ks)
        args = [np.full(tower.n_cells, c) for c in fixed] + [last]
        total += G(*args)
    return total


def periodic_operator(tower: Tower, G: TowerObservable, x0: Tuple[float, int], n0: int, t: float) -> ComposedOperator:
    """P_{it}^{v̄₀,n₀}: composition over one period of the twisted steps along the orbit of x₀."""
    ops = []
    for m in range(n0):
        a = [_orbit_cell(tower, x0, i * m) for i in range(1, G.ell)]
        ops.append(p_twisted(tower, t, a, G))
    return ComposedOperator(ops)


def classify_periodic(tower: Tower, G: TowerObservable, x0: Tuple[float, int], n0: int,
                      n_t: int = 48, tol: float = 1e-6) -> Dict:
    """Lattice / non-arithmetic / degenerate verdict from spectral radii over t."""
    gx = periodic_observable(tower, G, x0, n0)
    integer = bool(np.allclose(gx, np.round(gx), atol=1e-12))
    T = np.pi if integer else 4 * np.pi
    ts = np.linspace(T / n_t, T, n_t)
    radii = np.array([spectral_radius(periodic_operator(tower, G, x0, n0, t), probes=2, n_power=4)["radius"]
                      for t in ts])
    unit = radii >= 1.0 - tol
    if np.all(unit):
        verdict = "degenerate"
    elif integer and not np.any(unit):
        verdict = "lattice"
    elif not np.any(unit):
        verdict = "non-arithmetic"
    else:
        verdict = "lattice"
    return {"verdict": verdict, "integer_valued": integer, "t": ts.tolist(), "radius": radii.tolist(),
            "max_radius": float(radii.max())}


def spectral_report_json(t: float, rep: Dict) -> str:
    return json.dumps({"t": float(t), "radius": rep["radius"], "gap": rep["gap"],
                       "norm_growth_fit": rep["norm_growth_fit"]}, sort_keys=True)
