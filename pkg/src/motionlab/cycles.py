"""Periodic points, exact periods, repelling classification, cycle measures.

Enumeration is dual-strategy with a mandatory count audit against d^n + 1:

* small d^n: symbolic composition of the map with itself, then one
  polynomial solve;
* large n (polynomial maps): simultaneous Aberth iteration on the
  implicitly evaluated function f^n(z) - z.  Coefficient-level composition
  is catastrophically ill-conditioned there (coefficients reach 1e190 at
  n = 12 for degree 2 while all roots sit near modulus 1), so values and
  derivatives are computed by orbit iteration instead, and the iteration
  is seeded from lower-period solutions plus an exact backward preimage
  cloud of matching cardinality.

Birkhoff sums are evaluated once per cycle from its canonical
representative, so every atom of one cycle carries bit-identical mass and
the cycle measure is exactly pushforward-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    BudgetExceededError,
    CountAuditError,
    InvalidArgumentError,
    MotionlabError,
)
from .grid import SphereGrid
from .sphere import (
    EQUALITY_TOL,
    RationalMap,
    SpherePoint,
    _polyadd,
    _polyder,
    _polymul,
    _polyval,
    _strip_high,
    aberth_roots,
    chordal_dist,
    chordal_dist_arrays,
    multiplier,
    orbit,
    r3_embed_arrays,
)
from .thermo import DiscreteMeasure, EquilibriumData, backward_tree
from .weights import Weight

DEFAULT_BUDGET = 2**16 + 1
_SYMBOLIC_LIMIT = 64
_NEUTRAL_BAND = 1e-6


@dataclass
class PeriodicPoint:
    point: SpherePoint
    n: int
    exact_period: int
    multiplier: complex
    residual: float
    multiplicity: int = 1
    status: str = "repelling"
    birkhoff_weight: float = math.nan
    mass: float = math.nan

    @property
    def repelling(self) -> bool:
        return self.status == "repelling"


def _classify(mult: complex) -> str:
    m = abs(mult)
    if m > 1.0 + _NEUTRAL_BAND:
        return "repelling"
    if m < 1.0 - _NEUTRAL_BAND:
        return "attracting"
    return "undetermined"


def _proper_divisors(n: int) -> list[int]:
    return [m for m in range(1, n) if n % m == 0]


# ---------------------------------------------------------------------------
# enumeration


def _compose_symbolic(f: RationalMap, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of f^n as one rational function, renormalized per level."""
    num, den = f.num.copy(), f.den.copy()
    for _ in range(n - 1):
        d = len(f.num) - 1
        pow_n = [np.array([1.0 + 0j])]
        pow_d = [np.array([1.0 + 0j])]
        for _ in range(d):
            pow_n.append(_polymul(pow_n[-1], num))
            pow_d.append(_polymul(pow_d[-1], den))
        new_num = np.zeros(1, dtype=complex)
        new_den = np.zeros(1, dtype=complex)
        for k in range(d + 1):
            cross = _polymul(pow_n[k], pow_d[d - k])
            new_num = _polyadd(new_num, f.num[k] * cross)
            new_den = _polyadd(new_den, f.den[k] * cross)
        scale = max(np.max(np.abs(new_num)), np.max(np.abs(new_den)))
        num, den = new_num / scale, new_den / scale
    return num, den


def _symbolic_roots(f: RationalMap, n: int) -> tuple[np.ndarray, int]:
    """Finite roots of f^n(z) = z plus the multiplicity at infinity."""
    num_n, den_n = _compose_symbolic(f, n)
    g = _polyadd(num_n, -_polymul(np.array([0, 1.0 + 0j]), den_n))
    g = _strip_high(g)
    if np.all(g == 0):
        raise MotionlabError("f^n(z) - z vanished identically")
    expected = f.degree**n + 1
    inf_mult = expected - (len(g) - 1)
    roots = aberth_roots(g)
    # polish on the implicit orbit function: the composed coefficients are
    # the ill-conditioned representation, the orbit value is not
    if len(f.den) == 1 or np.all(np.abs(f.den[1:]) == 0):
        roots = _implicit_polish(f, n, roots, steps=3)
    else:
        dg = _polyder(g)
        for _ in range(2):
            pv = _polyval(g, roots)
            dv = _polyval(dg, roots)
            with np.errstate(divide="ignore", invalid="ignore"):
                corr = np.where(dv != 0, pv / np.where(dv != 0, dv, 1.0), 0.0)
            ok = np.abs(corr) < 1e-2 * (1.0 + np.abs(roots))
            roots = np.where(ok, roots - corr, roots)
    return roots, inf_mult


def _is_polynomial(f: RationalMap) -> bool:
    return bool(np.all(np.abs(f.den[1:]) == 0))


def _orbit_value_and_deriv(f: RationalMap, z: np.ndarray, n: int):
    """(f^n(z) - z, (f^n)'(z) - 1, escaped) by forward iteration.

    Polynomial maps only.  Orbits passing 1e100 are flagged escaped; they
    are far from every periodic point by construction.
    """
    den0 = f.den[0]
    dnum = _polyder(f.num)
    w = z.copy()
    dw = np.ones_like(z)
    escaped = np.zeros(z.shape, dtype=bool)
    for _ in range(n):
        big = np.abs(w) > 1e100
        escaped |= big
        w = np.where(big, 0.0, w)
        dw = dw * _polyval(dnum, w) / den0
        w = _polyval(f.num, w) / den0
    return w - z, dw - 1.0, escaped


def _implicit_polish(f: RationalMap, n: int, roots: np.ndarray, steps: int = 3) -> np.ndarray:
    for _ in range(steps):
        p, dp, esc = _orbit_value_and_deriv(f, roots, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(dp != 0, p / np.where(dp != 0, dp, 1.0), 0.0)
        ok = (~esc) & (np.abs(corr) < 1e-2 * (1.0 + np.abs(roots)))
        roots = np.where(ok, roots - corr, roots)
    return roots


def _aberth_block_sums(z: np.ndarray, block: int = 1024) -> np.ndarray:
    m = z.shape[0]
    s = np.empty(m, dtype=complex)
    for lo in range(0, m, block):
        hi = min(lo + block, m)
        diff = z[lo:hi, None] - z[None, :]
        diff[np.arange(lo, hi) - lo, np.arange(lo, hi)] = np.inf
        s[lo:hi] = np.sum(1.0 / diff, axis=1)
    return s


def _implicit_seed_cloud(f: RationalMap, n: int, count: int, seed: int) -> np.ndarray:
    """Seed points: exact lower-period solutions, then a backward preimage
    cloud from a repelling fixed point, jittered to keep seeds distinct."""
    rng = np.random.default_rng(seed)
    seeds = []
    for m in _proper_divisors(n):
        try:
            for p in periodic_points(f, m):
                if not p.point.is_inf:
                    seeds.extend([p.point.z] * p.multiplicity)
        except MotionlabError:
            continue
    base = None
    for p in periodic_points(f, 1):
        if p.status == "repelling" and not p.point.is_inf:
            base = p.point
            break
    if base is not None and count > len(seeds):
        depth = n
        while f.degree**depth > 16384:
            depth -= 1
        levels, _ = backward_tree(f, base, depth)
        cloud = levels[-1][0][~levels[-1][1]]
        need = count - len(seeds)
        reps = int(math.ceil(need / max(cloud.shape[0], 1)))
        seeds.extend(np.tile(cloud, reps)[:need])
    out = np.array(seeds[:count], dtype=complex)
    if out.shape[0] < count:
        extra = count - out.shape[0]
        angles = rng.uniform(0, 2 * math.pi, extra)
        radii = rng.uniform(0.3, 1.7, extra)
        out = np.concatenate([out, radii * np.exp(1j * angles)])
    jitter = 1e-6 * (1.0 + np.abs(out)) * np.exp(1j * rng.uniform(0, 2 * math.pi, count))
    return out + jitter


def _implicit_roots(f: RationalMap, n: int, seed: int, maxiter: int = 80):
    """All d^n finite solutions of f^n(z) = z for a polynomial map."""
    count = f.degree**n
    z = _implicit_seed_cloud(f, n, count, seed)
    frozen = np.zeros(count, dtype=bool)
    for _ in range(maxiter):
        p, dp, esc = _orbit_value_and_deriv(f, z, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = np.where(dp != 0, p / np.where(dp != 0, dp, 1.0), 0.0)
        s = _aberth_block_sums(z)
        denom = 1.0 - newton * s
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(np.abs(denom) > 1e-12, newton / np.where(denom != 0, denom, 1.0), newton)
        step = np.where(esc, 0.0, step)
        znew = np.where(esc, 0.5 * z / np.maximum(np.abs(z), 1e-300), z - step)
        frozen = (~esc) & (np.abs(step) <= 1e-12 * (1.0 + np.abs(znew)))
        z = znew
        if np.all(frozen):
            break
    z = _implicit_polish(f, n, z, steps=3)
    p, dp, esc = _orbit_value_and_deriv(f, z, n)
    converged = (~esc) & (np.abs(p) <= 1e-8 * (1.0 + np.abs(dp)) * (1.0 + np.abs(z)))
    return z, converged


def periodic_points(
    f: RationalMap,
    n: int,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
) -> list[PeriodicPoint]:
    """All solutions of f^n(z) = z with multiplicity; count audited
    against d^n + 1."""
    if n < 1:
        raise InvalidArgumentError("period must be >= 1")
    d = f.degree
    expected = d**n + 1
    if expected > budget:
        feasible = int(math.floor(math.log(budget - 1, d)))
        raise BudgetExceededError(expected, budget, advice=f"largest feasible n is {feasible}")

    polynomial = _is_polynomial(f)
    if d**n <= _SYMBOLIC_LIMIT or not polynomial:
        if d**n > 2**12:
            raise MotionlabError(
                "symbolic enumeration beyond d^n = 4096 is numerically unreliable "
                "and the implicit path needs a polynomial map"
            )
        roots, inf_mult = _symbolic_roots(f, n)
        finite = _cluster_with_multiplicity(roots)
    else:
        attempts = 0
        while True:
            roots, converged = _implicit_roots(f, n, seed + attempts)
            if np.all(converged):
                break
            attempts += 1
            if attempts >= 3:
                raise CountAuditError(
                    f"{int(np.sum(~converged))} of {d**n} roots failed to converge "
                    f"after {attempts} seedings"
                )
        finite = _cluster_with_multiplicity(roots)
        inf_mult = 1  # infinity is a fixed point of every polynomial
    return _annotate(f, n, finite, inf_mult, expected)


def _cluster_with_multiplicity(roots: np.ndarray) -> list[tuple[complex, int]]:
    """Group computed roots within equality tolerance; tolerates none or
    genuine multiple roots, the audit decides which."""
    if roots.size == 0:
        return []
    order = np.lexsort((np.round(roots.imag, 12), np.round(roots.real, 12)))
    roots = roots[order]
    tree = cKDTree(r3_embed_arrays(roots, np.zeros(roots.shape, bool)))
    pairs = tree.query_pairs(2.0 * EQUALITY_TOL, output_type="ndarray")
    parent = np.arange(roots.shape[0])

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(roots.shape[0]):
        groups.setdefault(find(i), []).append(i)
    out = []
    for rep in sorted(groups):
        members = groups[rep]
        out.append((complex(np.mean(roots[members])), len(members)))
    return out


def _annotate(
    f: RationalMap,
    n: int,
    finite: list[tuple[complex, int]],
    inf_mult: int,
    expected: int,
) -> list[PeriodicPoint]:
    total = sum(m for _, m in finite) + inf_mult
    if total != expected:
        raise CountAuditError(
            f"periodic point count {total} != d^n + 1 = {expected} at n = {n}"
        )
    pts: list[PeriodicPoint] = []
    if finite:
        z = np.array([c for c, _ in finite])
        mults = _orbit_multipliers(f, z, n)
        periods = _exact_periods(f, z, n)
        resid = _orbit_residual(f, z, n)
        for k, (c, m) in enumerate(finite):
            mu = mults[k]
            pts.append(
                PeriodicPoint(
                    point=SpherePoint(c),
                    n=n,
                    exact_period=int(periods[k]),
                    multiplier=complex(mu),
                    residual=float(resid[k]),
                    multiplicity=m,
                    status=_classify(mu),
                )
            )
    if inf_mult:
        inf = SpherePoint.infinity()
        mu = multiplier(f, inf, n)
        pts.append(
            PeriodicPoint(
                point=inf,
                n=n,
                exact_period=_exact_period_scalar(f, inf, n),
                multiplier=mu,
                residual=chordal_dist(orbit(f, inf, n)[-1], inf),
                multiplicity=inf_mult,
                status=_classify(mu),
            )
        )
    pts.sort(key=lambda p: p.point.sort_key())
    return pts


def _orbit_multipliers(f: RationalMap, z: np.ndarray, n: int) -> np.ndarray:
    if _is_polynomial(f):
        den0 = f.den[0]
        dnum = _polyder(f.num)
        w = z.copy()
        out = np.ones_like(z)
        for _ in range(n):
            out = out * _polyval(dnum, w) / den0
            w = _polyval(f.num, w) / den0
        return out
    return np.array([multiplier(f, SpherePoint(c), n) for c in z])


def _orbit_residual(f: RationalMap, z: np.ndarray, n: int) -> np.ndarray:
    w = z.copy()
    winf = np.zeros(z.shape, dtype=bool)
    for _ in range(n):
        w, winf = f.eval_arrays(w, winf)
    return chordal_dist_arrays(w, winf, z, np.zeros(z.shape, bool))


def _exact_periods(f: RationalMap, z: np.ndarray, n: int) -> np.ndarray:
    periods = np.full(z.shape, n, dtype=int)
    undecided = np.ones(z.shape, dtype=bool)
    w = z.copy()
    winf = np.zeros(z.shape, dtype=bool)
    for m in range(1, n):
        w, winf = f.eval_arrays(w, winf)
        if n % m:
            continue
        back = chordal_dist_arrays(w, winf, z, np.zeros(z.shape, bool)) <= EQUALITY_TOL
        hit = back & undecided
        periods[hit] = m
        undecided &= ~back
    return periods


def _exact_period_scalar(f: RationalMap, p: SpherePoint, n: int) -> int:
    pts = orbit(f, p, n)
    for m in range(1, n + 1):
        if n % m == 0 and chordal_dist(pts[m], p) <= EQUALITY_TOL:
            return m
    return n


def exact_period_filter(points: Sequence[PeriodicPoint], n: int) -> list[PeriodicPoint]:
    return [p for p in points if p.exact_period == n]


# ---------------------------------------------------------------------------
# cycle measures


def _canonical_cycles(f: RationalMap, points: list[PeriodicPoint]) -> list[list[int]]:
    """Partition point indices into cycles by following f through the set.

    Infinity participates like any other point (cycles may pass through
    it).  Each cycle is listed in orbit order starting from its
    lexicographically least member; points is already canonically sorted,
    so iteration order is deterministic.
    """
    z = np.array([p.point.z for p in points])
    inf = np.array([p.point.is_inf for p in points])
    tree = cKDTree(r3_embed_arrays(z, inf))
    fz, finf = f.eval_arrays(z, inf)
    dist, succ = tree.query(r3_embed_arrays(fz, finf), k=1)
    if np.any(dist > 2e-6):
        raise MotionlabError("cycle successor not found in the point set")
    seen = np.zeros(len(points), dtype=bool)
    cycles: list[list[int]] = []
    for start in range(len(points)):
        if seen[start]:
            continue
        chain = [start]
        seen[start] = True
        cur = int(succ[start])
        while cur != start:
            if seen[cur]:
                raise MotionlabError("preperiodic chain inside periodic point set")
            chain.append(cur)
            seen[cur] = True
            cur = int(succ[cur])
        keys = [points[c].point.sort_key() for c in chain]
        lead = min(range(len(chain)), key=lambda i: keys[i])
        cycles.append(chain[lead:] + chain[:lead])
    return cycles


def annotate_cycle_weights(
    f: RationalMap, w: Weight, points: list[PeriodicPoint], n: int, pressure: float
) -> int:
    """Fill birkhoff_weight and mass in place; returns the number of
    undetermined-multiplier points encountered.

    The Birkhoff sum of a cycle is computed once, in orbit order from the
    canonical representative, and shared verbatim by every member; the sum
    over n steps of a point with exact period m is (n/m) times the sum
    over the cycle.
    """
    undetermined = 0
    for cycle in _canonical_cycles(f, points):
        members = [points[k] for k in cycle]
        length = len(cycle)
        if n % length:
            raise MotionlabError("cycle length does not divide the ambient period")
        z = np.array([p.point.z for p in members])
        inf = np.array([p.point.is_inf for p in members])
        phi = w.eval_arrays(z, inf)
        s_n = (n // length) * float(np.sum(phi))
        mass = math.exp(s_n - n * pressure)
        for p in members:
            p.birkhoff_weight = s_n
            p.mass = mass
            if p.status == "undetermined":
                undetermined += 1
    return undetermined


def weighted_cycle_measure(
    f: RationalMap,
    w: Weight,
    n: int,
    pressure: float,
    repelling_only: bool = True,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    points: Optional[list[PeriodicPoint]] = None,
) -> DiscreteMeasure:
    """Atoms at n-periodic points, mass e^{S_n phi - n P} each.

    repelling_only drops attracting and undetermined points (the latter
    counted in diagnostics).
    """
    if points is None:
        points = periodic_points(f, n, budget=budget, seed=seed)
    undet = annotate_cycle_weights(f, w, points, n, pressure)
    keep = [p for p in points if (p.repelling or not repelling_only)]
    if not keep:
        raise MotionlabError("no atoms pass the repelling filter")
    z = np.array([p.point.z for p in keep])
    inf = np.array([p.point.is_inf for p in keep])
    mass = np.array([p.mass * p.multiplicity for p in keep])
    out = DiscreteMeasure(z, inf, mass)
    out.diagnostics["undetermined_excluded"] = undet if repelling_only else 0
    out.diagnostics["total_points"] = sum(p.multiplicity for p in points)
    out.diagnostics["repelling_points"] = sum(
        p.multiplicity for p in points if p.repelling
    )
    return out


def equidistribution_curve(
    f: RationalMap,
    w: Weight,
    grid: SphereGrid,
    n_range: Sequence[int],
    equilibrium: EquilibriumData,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
) -> dict:
    """W1 distance of the normalized cycle measure to mu_phi per n."""
    from .metrics import wasserstein1_report

    rows = []
    for n in n_range:
        nu = weighted_cycle_measure(f, w, n, equilibrium.pressure, True, budget, seed)
        rep = wasserstein1_report(nu.normalized(), equilibrium.mu)
        rows.append(
            {
                "n": int(n),
                "distance": rep["distance"],
                "total_mass": nu.total_mass(),
                "atoms": nu.atom_count,
                "certified_gap": rep["certified_gap"],
                "quantization_error_bound": rep["quantization_error_bound"],
            }
        )
    dists = [r["distance"] for r in rows]
    return {
        "rows": rows,
        "monotone_decreasing": all(b < a for a, b in zip(dists, dists[1:])),
    }
