"""Real and complex cones of locally Lipschitz tower functions.

The real cone 𝒞_ℝ = 𝒞_{a,b,c,ε₀,s} is cut out by finitely many linear
functionals on the grid:

* Υ_P(f) = μ(P)^{-1} ∫_P f dm and Γ_P(f) = a∫f dm − Υ_P(f), for P ∈ 𝒫,
* Γ_{x,y}(f) = b∫f dm − (f(x) − f(y))/d(x, y) for ordered same-floor pairs,
* Γ_{x₁,±}(f) = c∫f dm ± f(x₁) for x₁ ∈ P₂.

Here m = v dm₀, μ = h dm = h₀ dm₀, and d is the non-uniform metric d_NU.
Every same-floor pair of cells is included, so membership is exact for the
grid cone. The complex cone is the canonical complexification.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .tower_core import Tower
from .transfer_ops import OperatorHandle, weighted

logger = logging.getLogger(__name__)


@dataclass
class ConeParams:
    """Cone parameters and the partition they refer to.

    ``partition`` lists the cell index arrays of 𝒫₁; ``p2`` holds the cells of
    P₂ (possibly empty). ``gamma_s`` bounds the d_NU diameters of 𝒫₁.
    """

    a: float
    b: float
    c: float
    epsilon0: float
    s: int
    partition: List[np.ndarray]
    p2: np.ndarray
    gamma_s: float
    sigma: float = 0.5
    # cached tower-dependent constants
    h_sup: float = 0.0
    h_sup_p2: float = 0.0
    lip_h: float = 0.0
    D: float = 0.0

    @property
    def c1(self) -> float:
        return self.a * self.h_sup + self.b * self.gamma_s

    @property
    def c2(self) -> float:
        return max(self.c, self.c1)

    @property
    def K(self) -> float:
        return 2.0 * np.sqrt(2.0) * (self.c2 + self.b)

    def shrunk(self, sigma: Optional[float] = None) -> "ConeParams":
        sg = self.sigma if sigma is None else sigma
        return ConeParams(sg * self.a, sg * self.b, sg * self.c, self.epsilon0, self.s, self.partition,
                          self.p2, self.gamma_s, self.sigma, self.h_sup, self.h_sup_p2, self.lip_h, self.D)

    def summary(self) -> Dict:
        return {"a": self.a, "b": self.b, "c": self.c, "epsilon0": self.epsilon0, "s": self.s,
                "gamma_s": self.gamma_s, "sigma": self.sigma, "c1": self.c1, "c2": self.c2,
                "D": self.D, "lip_h": self.lip_h, "h_sup": self.h_sup, "n_partition": len(self.partition),
                "p2_cells": int(self.p2.size)}


def build_partition(tower: Tower, s: int, epsilon0: float) -> Tuple[List[np.ndarray], np.ndarray]:
    """𝒫₁ from (floor, s-prefix) groups below a top block P₂ of m-mass < ε₀."""
    if not 0 < epsilon0 < 1:
        raise ValidationError("epsilon0 must lie in (0, 1)")
    if not 0 <= s <= tower.D:
        raise ValidationError("partition scale s must lie in [0, depth]")
    masses = [float(tower.m[cells].sum()) for cells in tower.floor_cells]
    top = tower.R_max
    acc = 0.0
    while top > 1 and acc + masses[top - 1] < epsilon0:
        acc += masses[top - 1]
        top -= 1
    p2 = np.flatnonzero(tower.floor >= top)
    groups = []
    div = tower.J ** (tower.D - s)
    for k in range(top):
        cells = tower.floor_cells[k]
        pref = tower.word[cells] // div
        for pv in np.unique(pref):
            groups.append(cells[pref == pv])
    return groups, p2


def default_params(tower: Tower, s: int = 2, epsilon0: float = 0.6, sigma: float = 0.5,
                   scale: float = 4.0) -> ConeParams:
    """Parameters with a, b, c a factor ``scale`` above the membership thresholds of h and 1."""
    part, p2 = build_partition(tower, s, epsilon0)
    cp = ConeParams(1.0, 1.0, 1.0, epsilon0, s, part, p2, tower.beta ** s, sigma)
    _cache_constants(tower, cp)
    cp.a = scale * max(1.0, cp.D)
    cp.b = scale * max(cp.lip_h, 1.0)
    cp.c = scale * max(cp.h_sup_p2, 1.0)
    return cp


def _cache_constants(tower: Tower, cp: ConeParams) -> None:
    h = tower.h
    cp.h_sup = float(np.max(np.abs(h)))
    cp.h_sup_p2 = float(np.max(np.abs(h[cp.p2]))) if cp.p2.size else 0.0
    cp.lip_h = float(tower.lip(h, "NU"))
    mu = tower.mu
    all_sets = list(cp.partition) + ([cp.p2] if cp.p2.size else [])
    cp.D = float(max(tower.m[P].sum() / mu[P].sum() for P in all_sets))
    for P in cp.partition:
        if P.size > 1:
            inv = tower.inverse_distance(int(tower.floor[P[0]]), "NU")
            loc = np.searchsorted(tower.floor_cells[int(tower.floor[P[0]])], P)
            sub = inv[np.ix_(loc, loc)]
            diam = 1.0 / sub[sub > 0].min()
            if diam > cp.gamma_s * (1 + 1e-12):
                raise ValidationError("partition element exceeds the diameter bound γ_s")


def make_params(tower: Tower, a: float, b: float, c: float, s: int = 2, epsilon0: float = 0.6,
                sigma: float = 0.5) -> ConeParams:
    part, p2 = build_partition(tower, s, epsilon0)
    cp = ConeParams(a, b, c, epsilon0, s, part, p2, tower.beta ** s, sigma)
    _cache_constants(tower, cp)
    return cp


class FunctionalFamily:
    """The functional set 𝒮 evaluated as one vector per function."""

    def __init__(self, tower: Tower, cp: ConeParams):
        self.tower = tower
        self.cp = cp
        m, mu = tower.m, tower.mu
        sets = list(cp.partition) + ([cp.p2] if cp.p2.size else [])
        n = tower.n_cells
        U = np.zeros((len(sets), n))
        for i, P in enumerate(sets):
            U[i, P] = m[P] / mu[P].sum()
        self.upsilon = U
        xs, ys, invd = [], [], []
        for k, cells in enumerate(tower.floor_cells):
            inv = tower.inverse_distance(k, "NU")
            ii, jj = np.nonzero(inv)
            xs.append(cells[ii])
            ys.append(cells[jj])
            invd.append(inv[ii, jj])
        self.px = np.concatenate(xs)
        self.py = np.concatenate(ys)
        self.pinv = np.concatenate(invd)
        self.x1 = cp.p2
        self.names = (["Upsilon"] * len(sets) + ["Gamma_P"] * len(sets) + ["Gamma_xy"] * self.px.size
                      + ["Gamma_x1+"] * self.x1.size + ["Gamma_x1-"] * self.x1.size)

    def __len__(self):
        return len(self.names)

    def integral(self, f):
        return np.tensordot(self.tower.m, f, axes=(0, 0))

    def evaluate(self, f, a=None, b=None, c=None) -> np.ndarray:
        """All functional values; f may be a batch with cells on axis 0 (returns K × batch)."""
        cp = self.cp
        a = cp.a if a is None else a
        b = cp.b if b is None else b
        c = cp.c if c is None else c
        f = np.asarray(f)
        I = self.integral(f)
        ups = self.upsilon @ f
        quot = (f[self.px] - f[self.py]) * (self.pinv if f.ndim == 1 else self.pinv[:, None])
        parts = [ups, a * I - ups, b * I - quot]
        if self.x1.size:
            parts += [c * I + f[self.x1], c * I - f[self.x1]]
        return np.concatenate([np.atleast_1d(p) if f.ndim == 1 else p for p in parts], axis=0)

    def evaluate_shrunk(self, f, sigma: float) -> np.ndarray:
        return self.evaluate(f, sigma * self.cp.a, sigma * self.cp.b, sigma * self.cp.c)


def _tol(I, cp: ConeParams):
    return 1e-12 * max(1.0, abs(I) * max(cp.a, cp.b, cp.c))


def real_membership(f, cp: ConeParams, fam: FunctionalFamily) -> Tuple[bool, List[str]]:
    """Membership via the three bullet families; returns the violated functional types."""
    tower = fam.tower
    f = np.asarray(f)
    if np.iscomplexobj(f):
        raise ValidationError("real_membership needs a real function")
    I = float(fam.integral(f))
    tol = _tol(I, cp)
    bad = []
    ups = fam.upsilon @ f
    if np.any(ups < -tol):
        bad.append("Upsilon")
    if np.any(ups > cp.a * I + tol):
        bad.append("Gamma_P")
    if float(tower.lip(f, "NU")) > cp.b * I + tol:
        bad.append("Gamma_xy")
    if cp.p2.size:
        v = f[cp.p2]
        if np.any(v > cp.c * I + tol):
            bad.append("Gamma_x1-")
        if np.any(-v > cp.c * I + tol):
            bad.append("Gamma_x1+")
    return not bad, bad


def min_functional(f, fam: FunctionalFamily) -> float:
    """min over 𝒮 of s(f), the second code path for membership."""
    return float(np.min(fam.evaluate(f)))


def is_member_fast(f, fam: FunctionalFamily, sigma: float = 1.0) -> np.ndarray:
    """Vectorized membership (batch-friendly) in the σ-scaled cone."""
    vals = fam.evaluate_shrunk(f, sigma) if sigma != 1.0 else fam.evaluate(f)
    I = fam.integral(f)
    tol = 1e-12 * np.maximum(1.0, np.abs(I) * max(fam.cp.a, fam.cp.b, fam.cp.c))
    return np.all(vals >= -tol, axis=0)


def sup_bound(f, cp: ConeParams, fam: FunctionalFamily) -> float:
    """Slack c₂∫f dm − ‖f‖_∞ of the sup bound (raises on non-members)."""
    ok, bad = real_membership(f, cp, fam)
    if not ok:
        raise ValidationError(f"sup_bound called on a non-member (violates {bad})")
    return float(cp.c2 * fam.integral(f) - np.max(np.abs(f)))


def hilbert_distance_real(f, g, fam: FunctionalFamily, check: bool = True) -> float:
    """Hilbert projective distance ln(β/α) over the functional family."""
    sf = fam.evaluate(f)
    sg = fam.evaluate(g)
    if check and (np.min(sf) < -1e-12 * np.abs(sf).max() or np.min(sg) < -1e-12 * np.abs(sg).max()):
        raise ValidationError("hilbert distance needs cone members")
    return _hilbert(sf, sg)


def _hilbert(sf: np.ndarray, sg: np.ndarray) -> float:
    scale_f = np.abs(sf).max()
    scale_g = np.abs(sg).max()
    pos = sf > 1e-14 * scale_f
    zf = ~pos
    if np.any(sg[zf] > 1e-14 * scale_g):
        return float("inf")
    if not np.any(pos):
        return float("inf")
    ratios = sg[pos] / sf[pos]
    lo, hi = ratios.min(), ratios.max()
    if lo <= 0:
        return float("inf")
    return float(np.log(hi / lo))


def complex_membership(f, fam: FunctionalFamily, tol: float = 1e-12) -> bool:
    """Re(conj(ν₁f) ν₂f) ≥ 0 for every pair, tested as an angular-spread check.

    All pairs satisfy the condition exactly when the arguments of the non-zero
    values fit in an arc of length π/2.
    """
    vals = fam.evaluate(np.asarray(f, dtype=complex))
    mag = np.abs(vals)
    nz = mag > tol * max(mag.max(), 1e-300)
    if nz.sum() <= 1:
        return True
    ang = np.sort(np.angle(vals[nz]))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    spread = 2 * np.pi - gaps.max()
    return bool(spread <= np.pi / 2 + 1e-12)


def complex_membership_bruteforce(f, fam: FunctionalFamily, tol: float = 1e-12) -> bool:
    vals = fam.evaluate(np.asarray(f, dtype=complex))
    G = np.real(np.conj(vals)[:, None] * vals[None, :])
    scale = np.abs(vals).max() ** 2
    return bool(G.min() >= -tol * scale)


def lipschitz_norm(tower: Tower, f) -> float:
    """‖f‖ = ‖f‖_∞ + Lip(f) with the d_NU seminorm."""
    f = np.asarray(f)
    return float(np.max(np.abs(f)) + tower.lip(f, "NU"))


def reproduction(f, cp: ConeParams, fam: FunctionalFamily) -> complex:
    """R(f) with f + R(f) h in the cone, from the four explicit lower bounds.

    For complex f, R(f) = R(Re f) + i R(Im f).
    """
    f = np.asarray(f)
    if np.iscomplexobj(f):
        return complex(_reproduction_real(f.real, cp, fam), _reproduction_real(f.imag, cp, fam))
    return _reproduction_real(f, cp, fam)


def _reproduction_real(f, cp: ConeParams, fam: FunctionalFamily) -> float:
    tower = fam.tower
    I = float(fam.integral(f))
    ups = fam.upsilon @ f
    cands = [0.0,
             float(np.max(ups - cp.a * I)) / (cp.a - 1.0),
             (float(tower.lip(f, "NU")) - cp.b * I) / (cp.b - cp.lip_h),
             float(np.max(-ups))]
    if cp.p2.size:
        cands.append((float(np.max(np.abs(f[cp.p2]))) - cp.c * I) / (cp.c - cp.h_sup_p2))
    R = max(cands)
    return R + 1e-9 * max(1.0, abs(R))


# --------------------------------------------------------------------------
# Batteries and contraction certificates
# --------------------------------------------------------------------------


def sample_members(tower: Tower, cp: ConeParams, fam: FunctionalFamily, n: int, seed: int,
                   max_halvings: int = 60) -> np.ndarray:
    """Rejection-sampled members f = h + amp·q with decreasing amplitude."""
    rng = np.random.default_rng(seed)
    h = tower.h
    out = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            depth = rng.integers(1, tower.D + 1)
            div = tower.J ** (tower.D - depth)
            coarse = rng.standard_normal((tower.R_max, tower.J ** depth))
            q = coarse[tower.floor, tower.word // div]
        elif kind == 1:
            q = np.sin(rng.uniform(1, 12) * tower.midpoints() + rng.uniform(0, 6.3)) * rng.uniform(0.2, 1, tower.R_max)[tower.floor]
        else:
            q = rng.standard_normal(tower.n_cells)
        q = q / lipschitz_norm(tower, q) * h.max()
        amp = rng.uniform(0.5, 4.0)
        for _ in range(max_halvings):
            f = h + amp * q
            if is_member_fast(f, fam):
                break
            amp *= 0.5
        else:
            f = h.copy()
        out.append(f * rng.uniform(0.5, 2.0))
    return np.stack(out, axis=1)


def pairwise_max_distance(S: np.ndarray, chunk: int = 8) -> float:
    """max over column pairs of the Hilbert distance, from functional values S (K × n)."""
    if np.any(S <= 0):
        raise ValidationError("pairwise distance needs strictly positive functional values")
    LS = np.log(S).T
    best = 0.0
    for i in range(0, LS.shape[0], chunk):
        diff = LS[None, :, :] - LS[i:i + chunk, None, :]
        best = max(best, float((diff.max(axis=2) - diff.min(axis=2)).max()))
    return best


@dataclass
class InvarianceResult:
    k0: int
    d0: float
    samples: int
    seed: int
    sigma: float
    member_fraction: List[float] = field(default_factory=list)


def cone_invariance_search(tower: Tower, cp: ConeParams, fam: FunctionalFamily, sigma: float,
                           k_max: int, battery: np.ndarray, seed: int = 0) -> InvarianceResult:
    """Smallest k with L^k(battery) inside the σ-shrunk cone, and the sampled diameter d₀."""
    if not 0 < sigma < 1:
        raise ValidationError("sigma must lie in (0, 1)")
    L = weighted(tower).base
    cur = battery.copy()
    fracs = []
    for k in range(k_max + 1):
        ok = is_member_fast(cur, fam, sigma)
        fracs.append(float(np.mean(ok)))
        if np.all(ok):
            d0 = pairwise_max_distance(fam.evaluate(cur))
            return InvarianceResult(k, d0, battery.shape[1], seed, sigma, fracs)
        cur = L @ cur
    raise ValidationError(f"no k <= {k_max} maps the battery into the shrunk cone (fractions {fracs})")


@dataclass
class ContractionCertificate:
    k: int
    d0: float
    epsilon_used: float
    delta: float
    d1: float
    passed: bool
    samples: int
    z: complex = 0j
    seed: int = 0
    params: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["z"] = [self.z.real, self.z.imag]
        return json.dumps(doc, indent=2, sort_keys=True, default=float)


def comparison_condition(tower: Tower, cp: ConeParams, fam: FunctionalFamily, z: complex, k: int,
                         us: Sequence[np.ndarray], step: int, battery: np.ndarray, d0: float,
                         seed: int = 0) -> ContractionCertificate:
    """Measure ε̂ in |s(ℒ_z^{ω,k} f) − s(ℒ_0^k f)| ≤ ε̂ s(ℒ_0^k f) and build the certificate."""
    if len(us) < k:
        raise ValidationError("environment shorter than k")
    L = weighted(tower).base
    fz = battery.astype(complex)
    f0 = battery.astype(complex)
    for j in range(k):
        fz = np.exp(z * np.asarray(us[j]))[:, None] * fz
        for _ in range(step):
            fz = L @ fz
            f0 = L @ f0
    s0 = fam.evaluate(f0).real
    sz = fam.evaluate(fz)
    if np.any(s0 <= 0):
        raise ValidationError("unperturbed images must lie in the interior of the cone")
    eps = float(np.max(np.abs(sz - s0) / s0))
    delta = 2.0 * eps * (1.0 + np.cosh(d0 / 2.0))
    passed = bool(delta < 1.0)
    d1 = d0 + 6.0 * abs(np.log(1.0 - delta)) if passed else float("inf")
    return ContractionCertificate(k=k, d0=d0, epsilon_used=eps, delta=float(delta), d1=float(d1), passed=passed,
                                  samples=battery.shape[1], z=complex(z), seed=seed, params=cp.summary())


def aa_prime_check(A: complex, Ap: complex, B: float, Bp: float, eps1: float, sigma: float) -> Tuple[bool, float, float]:
    """Return (admissible, lhs, rhs) for the A–A′ lemma."""
    admissible = (B > Bp and abs(A - B) <= eps1 * B and abs(Ap - Bp) <= eps1 * B and abs(Bp / B) <= sigma
                  and 0 <= sigma < 1)
    lhs = abs((A - Ap) / (B - Bp) - 1.0)
    rhs = 2.0 * eps1 / (1.0 - sigma)
    return admissible, float(lhs), float(rhs)


def random_aa_quadruples(n: int, seed: int):
    """Admissible quadruples (A, A′, B, B′, ε₁, σ), including boundary cases."""
    rng = np.random.default_rng(seed)
    B = np.exp(rng.uniform(-5, 5, n))
    sigma = rng.uniform(0, 0.99, n)
    Bp = B * sigma * rng.uniform(-1, 1, n)
    eps1 = rng.uniform(0, 0.5, n)
    r1 = np.sqrt(rng.uniform(0, 1, n))
    r2 = np.sqrt(rng.uniform(0, 1, n))
    edge = rng.random(n) < 0.2
    # boundary cases sit a relative 1e-12 inside so rounding keeps them admissible
    r1[edge] = 1.0 - 1e-12
    r2[edge] = 1.0 - 1e-12
    th1 = rng.uniform(0, 2 * np.pi, n)
    th2 = np.where(edge, th1 + np.pi, rng.uniform(0, 2 * np.pi, n))
    A = B + eps1 * B * r1 * np.exp(1j * th1)
    Ap = Bp + eps1 * B * r2 * np.exp(1j * th2)
    return A, Ap, B, Bp, eps1, sigma


def aperture_radius(tower: Tower, fam: FunctionalFamily, qs: np.ndarray, iters: int = 40) -> float:
    """Largest r (bisection) with h + r q/‖q‖ in the complex cone for every q of the battery."""
    h = tower.h.astype(complex)
    qn = [q / lipschitz_norm(tower, q) for q in qs.T]
    lo, hi = 0.0, 10.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if all(complex_membership(h + mid * q, fam) for q in qn):
            lo = mid
        else:
            hi = mid
    return lo
