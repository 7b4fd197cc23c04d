"""Transfer operator machinery at the base parameter.

Pressure and density come from power iteration of a sparse transfer
matrix on a sphere grid.  Conformal and equilibrium measures come from
exact backward preimage trees.  The two pressure estimates are
independent by construction and cross-checked; the tree ratio estimate
log(S_{n}/S_{n-1}) is the canonical one because measure weights downstream
amplify a pressure error delta by exp(n * delta).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .errors import (
    ConditionBError,
    InvalidArgumentError,
    MotionlabError,
)
from .grid import GridFunction, SphereGrid
from .sphere import (
    RationalMap,
    SpherePoint,
    chordal_dist_arrays,
    critical_orbit_distance,
    multiplier,
    preimage_fibers,
    r3_embed_arrays,
    sort_points,
)
from .weights import Weight, check_condition_B

ATOM_MERGE_TOL = 1e-9
_TREE_ATOM_LIMIT = 16384


# ---------------------------------------------------------------------------
# discrete measures


@dataclass
class DiscreteMeasure:
    """Finite nonnegative atomic measure on the sphere.

    Atoms are kept in canonical order: finite atoms lexicographic by
    (re, im), the atom at infinity last.  Construction merges atoms
    closer than ATOM_MERGE_TOL (chordal), mass-weighted.
    """

    z: np.ndarray
    inf: np.ndarray
    mass: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=complex)
        self.inf = np.asarray(self.inf, dtype=bool)
        self.mass = np.asarray(self.mass, dtype=float)
        if np.any(self.mass < 0):
            raise InvalidArgumentError("atom masses must be >= 0")
        if not np.all(np.isfinite(self.mass)):
            raise InvalidArgumentError("atom masses must be finite")
        self._merge_and_sort()

    def _merge_and_sort(self):
        n = self.z.shape[0]
        if n > 1:
            pts = r3_embed_arrays(self.z, self.inf)
            tree = cKDTree(pts)
            pairs = tree.query_pairs(2.0 * ATOM_MERGE_TOL, output_type="ndarray")
            if len(pairs):
                parent = np.arange(n)

                def find(i):
                    while parent[i] != i:
                        parent[i] = parent[parent[i]]
                        i = parent[i]
                    return i

                for a, b in pairs:
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[rb] = ra
                roots = np.array([find(i) for i in range(n)])
                uniq, idx = np.unique(roots, return_inverse=True)
                mass = np.zeros(len(uniq))
                np.add.at(mass, idx, self.mass)
                zsum = np.zeros(len(uniq), dtype=complex)
                np.add.at(zsum, idx, self.z * np.maximum(self.mass, 1e-300))
                wsum = np.zeros(len(uniq))
                np.add.at(wsum, idx, np.maximum(self.mass, 1e-300))
                anyinf = np.zeros(len(uniq), dtype=bool)
                np.logical_or.at(anyinf, idx, self.inf)
                self.z = np.where(anyinf, 0j, zsum / wsum)
                self.inf = anyinf
                self.mass = mass
        order = np.lexsort(
            (np.round(self.z.imag, 12), np.round(self.z.real, 12), self.inf)
        )
        self.z = self.z[order]
        self.inf = self.inf[order]
        self.mass = self.mass[order]

    @property
    def atom_count(self) -> int:
        return self.z.shape[0]

    def total_mass(self) -> float:
        return float(np.sum(self.mass))

    def normalized(self) -> "DiscreteMeasure":
        t = self.total_mass()
        if t <= 0:
            raise InvalidArgumentError("cannot normalize a zero measure")
        return DiscreteMeasure(self.z, self.inf, self.mass / t, dict(self.diagnostics))

    def pair_with(self, g: GridFunction) -> float:
        return float(np.dot(self.mass, g.at(self.z, self.inf)))

    def pushforward(self, f: RationalMap) -> "DiscreteMeasure":
        vals, oinf = f.eval_arrays(self.z, self.inf)
        return DiscreteMeasure(vals, oinf, self.mass.copy(), dict(self.diagnostics))

    def to_rows(self) -> list:
        rows = []
        for k in range(self.atom_count):
            if self.inf[k]:
                rows.append(["inf", 0.0, float(self.mass[k])])
            else:
                rows.append([float(self.z[k].real), float(self.z[k].imag), float(self.mass[k])])
        return rows

    @staticmethod
    def from_rows(rows: list) -> "DiscreteMeasure":
        z = np.zeros(len(rows), dtype=complex)
        inf = np.zeros(len(rows), dtype=bool)
        mass = np.zeros(len(rows))
        for k, row in enumerate(rows):
            if row[0] == "inf":
                inf[k] = True
            else:
                z[k] = complex(row[0], row[1])
            mass[k] = row[2]
        return DiscreteMeasure(z, inf, mass)

    @staticmethod
    def from_points(points: Sequence[SpherePoint], masses: Sequence[float]) -> "DiscreteMeasure":
        z = np.array([p.z for p in points], dtype=complex)
        inf = np.array([p.is_inf for p in points], dtype=bool)
        return DiscreteMeasure(z, inf, np.asarray(masses, dtype=float))


# ---------------------------------------------------------------------------
# cache


def _cache_key(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _cache_load(cache_dir: Optional[str], key: str) -> Optional[dict]:
    if not cache_dir:
        return None
    path = os.path.join(cache_dir, key + ".npz")
    if not os.path.exists(path):
        return None
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k].copy() for k in data.files}

def _cache_store(cache_dir: Optional[str], key: str, arrays: dict) -> None:
    if not cache_dir:
        return
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, key + ".npz")
    tmp = path + ".tmp.npz"
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, path)


def _map_doc(f: RationalMap) -> dict:
    return f.to_json_obj()


# ---------------------------------------------------------------------------
# transfer operator


def _grid_fibers(f: RationalMap, grid: SphereGrid, cache_dir: Optional[str] = None):
    """d preimages of every grid node; cached per (map, resolution)."""
    key = _cache_key({"kind": "fibers", "map": _map_doc(f), "resolution": grid.resolution})
    cached = _cache_load(cache_dir, key)
    if cached is not None:
        return cached["pts"], cached["pinf"]
    pts, pinf = preimage_fibers(f, grid.z, grid.inf_mask)
    _cache_store(cache_dir, key, {"pts": pts, "pinf": pinf})
    return pts, pinf


def transfer_matrix(
    f: RationalMap, w: Weight, grid: SphereGrid, cache_dir: Optional[str] = None
) -> sparse.csr_matrix:
    """Sparse matrix T with (T g)(y) = sum over preimages x of y of
    e^{phi(x)} g(x), g read off the grid by inverse-distance interpolation.
    """
    memo_key = (
        json.dumps(_map_doc(f), sort_keys=True),
        json.dumps(w.to_json_obj(), sort_keys=True),
    )
    hit = grid._transfer_cache.get(memo_key)
    if hit is not None:
        return hit
    pts, pinf = _grid_fibers(f, grid, cache_dir)
    m, d = pts.shape
    interp = grid.interp_matrix(pts.ravel(), pinf.ravel())
    phi = w.eval_arrays(pts.ravel(), pinf.ravel())
    scale = sparse.diags(np.exp(phi))
    # collapse the d fiber rows of each node into one row
    collect = sparse.csr_matrix(
        (np.ones(m * d), (np.repeat(np.arange(m), d), np.arange(m * d))),
        shape=(m, m * d),
    )
    t = (collect @ scale @ interp).tocsr()
    grid._transfer_cache[memo_key] = t
    return t


def transfer_apply(f: RationalMap, w: Weight, g: GridFunction, cache_dir: Optional[str] = None) -> GridFunction:
    t = transfer_matrix(f, w, g.grid, cache_dir)
    return GridFunction(g.grid, t @ g.values)


def pressure_and_density(
    f: RationalMap,
    w: Weight,
    grid: SphereGrid,
    tol: float = 1e-10,
    max_iter: int = 500,
    cache_dir: Optional[str] = None,
) -> tuple[float, GridFunction, list]:
    """Power iteration of the transfer operator with sup normalization.

    Returns (P, rho, residual_history); rho has sup norm 1 and is strictly
    positive.  P is the log of the stabilized normalization factor.
    """
    t = transfer_matrix(f, w, grid, cache_dir)
    g = np.ones(grid.node_count)
    history = []
    p_est = math.nan
    for _ in range(max_iter):
        h = t @ g
        s = float(np.max(np.abs(h)))
        h = h / s
        res = float(np.max(np.abs(h - g)))
        history.append(res)
        g = h
        p_est = math.log(s)
        if res < tol:
            if np.any(g <= 0):
                raise MotionlabError("density lost positivity")
            return p_est, GridFunction(grid, g), history
    raise MotionlabError(
        f"power iteration did not reach {tol:g} in {max_iter} steps; "
        f"last residuals {history[-5:]}"
    )


# ---------------------------------------------------------------------------
# backward trees


def backward_tree(
    f: RationalMap,
    x: SpherePoint,
    n: int,
    cache_dir: Optional[str] = None,
) -> tuple[list, dict]:
    """Exact preimage tree of depth n below x.

    Returns (levels, diagnostics); levels[k] = (z, inf, parent) arrays of
    f^{-(k+1)}(x) with multiplicity, parent indexing into level k-1 (the
    root for k = 0).  Children failing the forward residual check
    (chordal > 1e-6) are pruned and counted; fibers whose points cluster
    within 1e-8 of each other (critical fibers) are counted as warnings.
    """
    if n < 1:
        raise InvalidArgumentError("tree depth must be >= 1")
    if f.degree**n > _TREE_ATOM_LIMIT:
        raise InvalidArgumentError(
            f"backward tree needs {f.degree**n} atoms, limit {_TREE_ATOM_LIMIT}; lower n"
        )
    doc = {
        "kind": "btree",
        "map": _map_doc(f),
        "x": ["inf", 0.0] if x.is_inf else [x.z.real, x.z.imag],
        "n": n,
    }
    key = _cache_key(doc)
    cached = _cache_load(cache_dir, key)
    diag = {"pruned": 0, "multiplicity_warnings": 0}
    if cached is not None:
        levels = [(cached[f"lz{k}"], cached[f"li{k}"], cached[f"lp{k}"]) for k in range(n)]
        diag["pruned"] = int(cached["pruned"][0])
        diag["multiplicity_warnings"] = int(cached["warn"][0])
        return levels, diag

    cur_z = np.array([0j if x.is_inf else x.z])
    cur_inf = np.array([x.is_inf])
    levels = []
    for _ in range(n):
        pts, pinf = preimage_fibers(f, cur_z, cur_inf)
        m, d = pts.shape
        # critical-fiber warning: any two points of one fiber nearly equal
        for a in range(d):
            for b in range(a + 1, d):
                close = chordal_dist_arrays(pts[:, a], pinf[:, a], pts[:, b], pinf[:, b]) < 1e-8
                diag["multiplicity_warnings"] += int(np.sum(close))
        flat_z = pts.ravel()
        flat_inf = pinf.ravel()
        parent = np.repeat(np.arange(m), d)
        vals, vinf = f.eval_arrays(flat_z, flat_inf)
        res = chordal_dist_arrays(vals, vinf, cur_z[parent], cur_inf[parent])
        keep = res <= 1e-6
        diag["pruned"] += int(np.sum(~keep))
        flat_z = flat_z[keep]
        flat_inf = flat_inf[keep]
        parent = parent[keep]
        levels.append((flat_z, flat_inf, parent))
        cur_z, cur_inf = flat_z, flat_inf

    arrays = {"pruned": np.array([diag["pruned"]]), "warn": np.array([diag["multiplicity_warnings"]])}
    for k, (lz, li, lp) in enumerate(levels):
        arrays[f"lz{k}"] = lz
        arrays[f"li{k}"] = li
        arrays[f"lp{k}"] = lp
    _cache_store(cache_dir, key, arrays)
    return levels, diag


def _tree_log_weights(w: Weight, levels: list) -> list:
    """Birkhoff log-weights per level: logw(y) = sum of phi along the path
    from y forward to (but excluding) the root."""
    out = []
    prev = np.zeros(1)
    for lz, li, lp in levels:
        out.append(prev[lp] + w.eval_arrays(lz, li))
        prev = out[-1]
    return out


def conformal_measure(
    f: RationalMap,
    w: Weight,
    pressure: float,
    x: SpherePoint,
    n: int,
    cache_dir: Optional[str] = None,
) -> DiscreteMeasure:
    """Atoms at f^{-n}(x) with mass e^{S_n phi - n P}; mass totals approach
    the density at x as n grows."""
    dist = critical_orbit_distance(f, x, min(n, 14))
    if dist <= 1e-6:
        raise InvalidArgumentError(
            f"base point within {dist:.2e} of the truncated critical orbit"
        )
    levels, diag = backward_tree(f, x, n, cache_dir)
    logw = _tree_log_weights(w, levels)
    lz, li, _ = levels[-1]
    mass = np.exp(logw[-1] - n * pressure)
    out = DiscreteMeasure(lz, li, mass)
    out.diagnostics.update(diag)
    out.diagnostics["total_mass"] = out.total_mass()
    out.diagnostics["base_point_critical_distance"] = dist
    return out


def pressure_tree_estimate(
    f: RationalMap,
    w: Weight,
    base_points: Sequence[SpherePoint],
    n: int,
    cache_dir: Optional[str] = None,
) -> float:
    """Ratio estimator log(S_n / S_{n-1}) of the pressure, averaged over
    base points; S_k is the total e^{S_k phi} mass at tree level k.

    The ratio cancels the level-independent density factor, so the bias
    decays at the spectral-gap rate instead of like 1/n.
    """
    ests = []
    for x in base_points:
        levels, _ = backward_tree(f, x, n, cache_dir)
        logw = _tree_log_weights(w, levels)
        s_hi = logsumexp(logw[-1])
        s_lo = logsumexp(logw[-2]) if n >= 2 else 0.0
        ests.append(s_hi - s_lo)
    return float(np.mean(ests))


# ---------------------------------------------------------------------------
# base point selection


def repelling_fixed_points(f: RationalMap, period: int = 1) -> list[SpherePoint]:
    """Repelling periodic points of the given period (as fixed points of
    f^period), via direct polynomial solve; usable only while d^period
    stays small."""
    from .cycles import periodic_points  # local import, cycles depends on thermo

    return sort_points(
        p.point for p in periodic_points(f, period) if p.status == "repelling"
    )


def default_base_points(
    f: RationalMap,
    count: int = 3,
    min_critical_distance: float = 0.1,
    seed: int = 0,
) -> list[SpherePoint]:
    """Base points for backward trees: repelling fixed points first (they
    lie on the Julia set, so the whole tree does), then repelling period-2
    points, then seeded random points clear of the critical orbit."""
    chosen: list[SpherePoint] = []

    def admit(p: SpherePoint) -> bool:
        if critical_orbit_distance(f, p, 14) <= min_critical_distance:
            return False
        for q in chosen:
            if chordal_dist_arrays(
                np.array([p.z]), np.array([p.is_inf]), np.array([q.z]), np.array([q.is_inf])
            )[0] <= 1e-8:
                return False
        return True

    for period in (1, 2):
        for p in repelling_fixed_points(f, period):
            if len(chosen) >= count:
                return chosen
            if admit(p):
                chosen.append(p)
    rng = np.random.default_rng(seed)
    guard = 0
    while len(chosen) < count and guard < 1000:
        guard += 1
        z = complex(rng.normal(), rng.normal())
        p = SpherePoint(z)
        if admit(p):
            chosen.append(p)
    if not chosen:
        raise MotionlabError("no admissible base point found")
    return chosen


# ---------------------------------------------------------------------------
# equilibrium data


@dataclass
class EquilibriumData:
    pressure: float
    rho: GridFunction
    m: DiscreteMeasure
    mu: DiscreteMeasure
    diagnostics: dict = field(default_factory=dict)

    def validate(self) -> None:
        if np.any(self.rho.values <= 0):
            raise MotionlabError("density must be strictly positive")
        pairing = self.m.pair_with(self.rho)
        if abs(pairing - 1.0) > 1e-6:
            raise MotionlabError(f"<m, rho> = {pairing} != 1")
        if abs(self.mu.total_mass() - 1.0) > 1e-6:
            raise MotionlabError("mu is not a probability measure")

    def to_json_obj(self) -> dict:
        return {
            "pressure": self.pressure,
            "rho": [float(v) for v in self.rho.values],
            "m_atoms": self.m.to_rows(),
            "mu_atoms": self.mu.to_rows(),
            "diagnostics": _json_safe(self.diagnostics),
        }


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def equilibrium_state(
    f: RationalMap,
    w: Weight,
    grid: SphereGrid,
    tol: float = 1e-10,
    max_iter: int = 500,
    depth: int = 12,
    base_points: Optional[Sequence[SpherePoint]] = None,
    base_count: int = 3,
    q: float = 3.0,
    seed: int = 0,
    cache_dir: Optional[str] = None,
) -> EquilibriumData:
    """Pressure, density, conformal measure, and equilibrium state.

    Atoms are pooled over base points and depths {depth-1, depth}; pooling
    without renormalizing the individual trees weights each tree by the
    mass it actually collected, which is the density at its base point.
    """
    report = check_condition_B(w, f.degree, q, grid_resolution=grid.resolution)
    if not report["passes"]:
        raise ConditionBError(
            f"certified oscillation {report['omega']:.6f} >= log d = {report['bound']:.6f}"
        )
    while f.degree**depth > _TREE_ATOM_LIMIT:
        depth -= 1
    p_grid, rho, history = pressure_and_density(f, w, grid, tol, max_iter, cache_dir)
    if base_points is None:
        base_points = default_base_points(f, base_count, seed=seed)
    p_tree = pressure_tree_estimate(f, w, base_points, depth, cache_dir)

    pooled_z, pooled_inf, pooled_mass = [], [], []
    total_by_depth = {}
    pruned = 0
    warned = 0
    for x in base_points:
        for n in (depth - 1, depth):
            mx = conformal_measure(f, w, p_tree, x, n, cache_dir)
            pooled_z.append(mx.z)
            pooled_inf.append(mx.inf)
            pooled_mass.append(mx.mass)
            total_by_depth.setdefault(n, []).append(mx.total_mass())
            pruned += mx.diagnostics["pruned"]
            warned += mx.diagnostics["multiplicity_warnings"]
    m_raw = DiscreteMeasure(
        np.concatenate(pooled_z), np.concatenate(pooled_inf), np.concatenate(pooled_mass)
    )
    pairing = m_raw.pair_with(rho)
    if pairing <= 0:
        raise MotionlabError("conformal measure pairs to zero against the density")
    m = DiscreteMeasure(m_raw.z, m_raw.inf, m_raw.mass / pairing)
    mu_mass = m.mass * rho.at(m.z, m.inf)
    mu = DiscreteMeasure(m.z, m.inf, mu_mass).normalized()

    diagnostics = {
        "pressure_grid": p_grid,
        "pressure_tree": p_tree,
        "pressure_gap": abs(p_grid - p_tree),
        "residual_history": history,
        "condition_b": report,
        "base_points": [["inf", 0.0] if p.is_inf else [p.z.real, p.z.imag] for p in base_points],
        "depth": depth,
        "pruned": pruned,
        "multiplicity_warnings": warned,
        "mass_ratio_by_depth": {
            str(n): float(np.mean(v)) for n, v in sorted(total_by_depth.items())
        },
    }
    data = EquilibriumData(pressure=p_tree, rho=rho, m=m, mu=mu, diagnostics=diagnostics)
    data.validate()
    return data


def invariance_defect(f: RationalMap, mu: DiscreteMeasure, testfns: Sequence[GridFunction]) -> float:
    """max over the panel of |<mu, g o f> - <mu, g>|."""
    if abs(mu.total_mass() - 1.0) > 1e-6:
        raise InvalidArgumentError("invariance defect expects a probability measure")
    fz, finf = f.eval_arrays(mu.z, mu.inf)
    worst = 0.0
    for g in testfns:
        lhs = float(np.dot(mu.mass, g.at(fz, finf)))
        rhs = float(np.dot(mu.mass, g.at(mu.z, mu.inf)))
        worst = max(worst, abs(lhs - rhs))
    return worst
