"""Parameter families and holomorphic continuation of periodic points.

A Family is a rational map whose coefficients are polynomials in one
complex parameter, together with a disk of parameters discretized by a
square lattice anchored at the base parameter.  Periodic points found at
the base are continued node by node across the lattice (breadth first,
Newton at each node seeded from the already-solved neighbor), producing
MotionGraph objects: one sphere point per parameter node, with the
multiplier and the periodicity residual tracked everywhere.

Graphs are classified "ok" (repelling at every node), "nonpersistent"
(Newton diverged, or the multiplier modulus dipped to 1 or below inside
the disk), or "broken" (a node converged but missed the residual target,
or the continuation step underflowed).  Web measures collect the
persistent repelling graphs of one period with the same Birkhoff masses
used for periodic-point measures; slicing a web at a parameter node
yields an ordinary discrete measure on the sphere.

The diagnostics half of the module estimates per-level contraction of
backward branches over a tube around a graph, weight distortion along
branch pairs, and the parameter Lyapunov function with its discrete
harmonicity defect.  Backward sampling uses common random choices across
parameter nodes so that sampling noise varies smoothly in the parameter
and cancels in second differences.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cycles import DEFAULT_BUDGET, PeriodicPoint, annotate_cycle_weights, periodic_points
from .errors import ChartError, InvalidArgumentError, MotionlabError
from .sphere import (
    RationalMap,
    SpherePoint,
    _chart_coord,
    _chart_of,
    _polyval,
    chordal_dist,
    multiplier as orbit_multiplier,
    preimage_fibers,
    r3_embed_arrays,
)
from .thermo import DiscreteMeasure
from .weights import Weight

_RESIDUAL_TOL = 1e-10
_NEWTON_STEP_TOL = 5e-14
_NEWTON_MAX = 60
_MAX_SUBSTEP_DEPTH = 5  # up to 2^5 substeps between adjacent nodes
_MIN_SUBSTEP = 1e-12
_BIG = 1e8
_DEFAULT_MARGIN = 0.05
_AMBIGUITY_RATIO = 0.5
_NODE_MATCH_TOL = 1e-10


def _chordal_arrays(z1, inf1, z2, inf2):
    a = r3_embed_arrays(np.asarray(z1, dtype=complex), np.asarray(inf1, dtype=bool))
    b = r3_embed_arrays(np.asarray(z2, dtype=complex), np.asarray(inf2, dtype=bool))
    return 0.5 * np.linalg.norm(a - b, axis=-1)


# ---------------------------------------------------------------------------
# parameter grid


@dataclass(frozen=True)
class ParamGrid:
    """Square lattice over a parameter disk, anchored at the base parameter.

    Nodes are stored row-major over the bounding square (rows by increasing
    imaginary part, columns by increasing real part); out-of-disk lattice
    sites are absent from `nodes` but representable through `flat_index`,
    which maps (row, col) to the node index or -1.  Anchoring the lattice at
    the base parameter makes every coarse node reappear when the mesh is
    halved.
    """

    center: complex
    radius: float
    mesh: float
    base: complex
    nodes: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    shape: tuple
    flat_index: np.ndarray
    base_index: int
    neighbors: np.ndarray  # (K, 4) node indices, -1 where absent

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    def node_of(self, lam: complex) -> int:
        hits = np.nonzero(np.abs(self.nodes - lam) <= _NODE_MATCH_TOL)[0]
        if hits.size != 1:
            raise InvalidArgumentError("parameter %s is not a grid node" % lam)
        return int(hits[0])

    def bfs_order(self):
        """(order, parent) for breadth-first traversal from the base node."""
        k = self.node_count
        parent = np.full(k, -1, dtype=int)
        seen = np.zeros(k, dtype=bool)
        seen[self.base_index] = True
        order = [self.base_index]
        queue = deque([self.base_index])
        while queue:
            cur = queue.popleft()
            for nb in self.neighbors[cur]:
                if nb >= 0 and not seen[nb]:
                    seen[nb] = True
                    parent[nb] = cur
                    order.append(nb)
                    queue.append(nb)
        if not seen.all():
            raise InvalidArgumentError(
                "parameter grid is disconnected at this mesh; refine the mesh"
            )
        return np.array(order, dtype=int), parent


def _build_param_grid(base: complex, center: complex, radius: float, mesh: float) -> ParamGrid:
    if radius < 0:
        raise InvalidArgumentError("disk radius must be >= 0")
    if mesh <= 0:
        raise InvalidArgumentError("mesh must be positive")
    if abs(base - center) > radius + 1e-12:
        raise InvalidArgumentError("base parameter lies outside the domain disk")
    h = float(mesh)
    i_lo = math.ceil((center.real - radius - base.real) / h - 1e-12)
    i_hi = math.floor((center.real + radius - base.real) / h + 1e-12)
    j_lo = math.ceil((center.imag - radius - base.imag) / h - 1e-12)
    j_hi = math.floor((center.imag + radius - base.imag) / h + 1e-12)
    ii = np.arange(i_lo, i_hi + 1)
    jj = np.arange(j_lo, j_hi + 1)
    re = base.real + h * ii
    im = base.imag + h * jj
    lam = re[None, :] + 1j * im[:, None]  # (rows, cols), rows by increasing imag
    inside = np.abs(lam - center) <= radius + 1e-12
    shape = lam.shape
    flat_index = np.full(shape, -1, dtype=int)
    rows, cols = np.nonzero(inside)
    flat_index[rows, cols] = np.arange(rows.size)
    nodes = lam[rows, cols]
    k = nodes.size
    if k == 0:
        raise InvalidArgumentError("parameter disk contains no lattice node")
    neighbors = np.full((k, 4), -1, dtype=int)
    for t, (dr, dc) in enumerate(((0, -1), (0, 1), (-1, 0), (1, 0))):
        rr, cc = rows + dr, cols + dc
        ok = (rr >= 0) & (rr < shape[0]) & (cc >= 0) & (cc < shape[1])
        neighbors[ok, t] = flat_index[rr[ok], cc[ok]]
    base_hits = np.nonzero(np.abs(nodes - base) <= 1e-12)[0]
    if base_hits.size != 1:
        raise InvalidArgumentError("base parameter did not land on the lattice")
    return ParamGrid(
        center=complex(center),
        radius=float(radius),
        mesh=h,
        base=complex(base),
        nodes=nodes,
        rows=rows,
        cols=cols,
        shape=shape,
        flat_index=flat_index,
        base_index=int(base_hits[0]),
        neighbors=neighbors,
    )


def _same_grid(a: ParamGrid, b: ParamGrid) -> bool:
    return a is b or (
        a.shape == b.shape
        and a.mesh == b.mesh
        and a.node_count == b.node_count
        and np.allclose(a.nodes, b.nodes, rtol=0, atol=1e-12)
    )


# ---------------------------------------------------------------------------
# family


@dataclass(frozen=True)
class Family:
    """Rational family: map coefficients are polynomials in the parameter.

    num_coeffs[j] / den_coeffs[j] is the parameter polynomial (constant
    first) of the z^j coefficient.  The family must restrict to a valid
    rational map of one constant degree at every grid node; this is checked
    on construction.
    """

    num_coeffs: tuple
    den_coeffs: tuple
    grid: ParamGrid
    degree: int
    _maps: dict = field(default_factory=dict, repr=False, compare=False)
    _bfs: list = field(default_factory=list, repr=False, compare=False)

    def map_at_lambda(self, lam: complex) -> RationalMap:
        num = [complex(_polyval(np.asarray(c, dtype=complex), lam)) for c in self.num_coeffs]
        den = [complex(_polyval(np.asarray(c, dtype=complex), lam)) for c in self.den_coeffs]
        return RationalMap(num, den)

    def map_at(self, node: int) -> RationalMap:
        f = self._maps.get(node)
        if f is None:
            f = self.map_at_lambda(complex(self.grid.nodes[node]))
            self._maps[node] = f
        return f

    def base_map(self) -> RationalMap:
        return self.map_at(self.grid.base_index)

    def bfs_order(self):
        if not self._bfs:
            self._bfs.append(self.grid.bfs_order())
        return self._bfs[0]

    def to_json_obj(self) -> dict:
        pack = lambda polys: [[[c.real, c.imag] for c in map(complex, poly)] for poly in polys]
        return {
            "num": pack(self.num_coeffs),
            "den": pack(self.den_coeffs),
            "base": [self.grid.base.real, self.grid.base.imag],
            "center": [self.grid.center.real, self.grid.center.imag],
            "radius": self.grid.radius,
            "mesh": self.grid.mesh,
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "Family":
        unpack = lambda polys: [[complex(c[0], c[1]) for c in poly] for poly in polys]
        return build_family(
            unpack(obj["num"]),
            unpack(obj["den"]),
            base=complex(obj["base"][0], obj["base"][1]),
            center=complex(obj["center"][0], obj["center"][1]),
            radius=float(obj["radius"]),
            mesh=float(obj["mesh"]),
        )


def build_family(num_coeffs, den_coeffs, base, center=None, radius=0.05, mesh=None) -> Family:
    """Validated Family over the disk (center, radius) with lattice mesh.

    center defaults to the base parameter; mesh defaults to radius / 6
    (one lattice step per sixth of the radius), or 1 for a radius-0 disk.
    """
    center = base if center is None else center
    if mesh is None:
        mesh = radius / 6.0 if radius > 0 else 1.0
    grid = _build_param_grid(complex(base), complex(center), float(radius), float(mesh))
    num = tuple(tuple(complex(c) for c in poly) for poly in num_coeffs)
    den = tuple(tuple(complex(c) for c in poly) for poly in den_coeffs)
    fam = Family(num_coeffs=num, den_coeffs=den, grid=grid, degree=0)
    f0 = fam.map_at_lambda(grid.base)
    object.__setattr__(fam, "degree", f0.degree)
    for k in range(grid.node_count):
        fk = fam.map_at(k)
        if fk.degree != f0.degree:
            raise InvalidArgumentError(
                "family degree changes at grid node %d" % k
            )
    return fam


def quadratic_family(base=0j, center=None, radius=0.05, mesh=None) -> Family:
    """z^2 + parameter."""
    return build_family(
        [(0j, 1 + 0j), (0j,), (1 + 0j,)], [(1 + 0j,)],
        base=base, center=center, radius=radius, mesh=mesh,
    )


def power_family(d: int) -> Family:
    """z^d frozen at a single parameter node (radius-0 disk)."""
    if d < 2:
        raise InvalidArgumentError("degree must be >= 2")
    num = [(0j,)] * d + [(1 + 0j,)]
    return build_family(num, [(1 + 0j,)], base=0j, radius=0.0, mesh=1.0)


# ---------------------------------------------------------------------------
# motion graphs


@dataclass
class MotionGraph:
    """One continued periodic point: a sphere point per parameter node."""

    family: Family
    n: int
    values: np.ndarray
    inf_mask: np.ndarray
    multipliers: np.ndarray
    residuals: np.ndarray
    status: str
    frontier: tuple
    base_point: SpherePoint
    birkhoff_weight: float = math.nan

    def value_at(self, node: int) -> SpherePoint:
        if self.inf_mask[node]:
            return SpherePoint.infinity()
        return SpherePoint(complex(self.values[node]))

    @property
    def residual_max(self) -> float:
        return float(np.max(self.residuals))

    @property
    def min_multiplier_modulus(self) -> float:
        return float(np.min(np.abs(self.multipliers)))

    def to_json_obj(self) -> dict:
        grid = self.family.grid
        rows, cols = grid.shape
        values = [[None] * cols for _ in range(rows)]
        mults = [[None] * cols for _ in range(rows)]
        for k in range(grid.node_count):
            r, c = int(grid.rows[k]), int(grid.cols[k])
            values[r][c] = "inf" if self.inf_mask[k] else [
                float(self.values[k].real), float(self.values[k].imag)]
            m = self.multipliers[k]
            mults[r][c] = [float(m.real), float(m.imag)] if np.isfinite(m) else None
        rmax = self.residual_max
        return {
            "n": self.n,
            "grid": {
                "center": [grid.center.real, grid.center.imag],
                "radius": grid.radius,
                "mesh": grid.mesh,
            },
            "values": values,
            "multipliers": mults,
            "weight": None if math.isnan(self.birkhoff_weight) else self.birkhoff_weight,
            "residual_max": rmax if math.isfinite(rmax) else None,
            "status": self.status,
        }


# ---------------------------------------------------------------------------
# Newton continuation


def _orbit_newton_terms(f: RationalMap, z: np.ndarray, n: int):
    """f^n(z) - z, (f^n)'(z) - 1, and a mask where the plane chart failed."""
    w = z.astype(complex, copy=True)
    deriv = np.ones_like(w)
    bad = ~np.isfinite(w) | (np.abs(w) > _BIG)
    w = np.where(bad, 0.0, w)
    for _ in range(n):
        nv = _polyval(f.num, w)
        dv = _polyval(f.den, w)
        npv = _polyval(f.dnum, w)
        dpv = _polyval(f.dden, w)
        bad |= np.abs(dv) <= 1e-280 * np.maximum(1.0, np.abs(nv))
        safe = np.where(bad, 1.0, dv)
        deriv = deriv * (npv * dv - nv * dpv) / (safe * safe)
        w = np.where(bad, w, nv / safe)
        bad |= ~np.isfinite(w) | (np.abs(w) > _BIG)
        w = np.where(bad, 0.0, w)
    return w - z, deriv - 1.0, bad


def _newton_batch(f: RationalMap, seeds: np.ndarray, n: int):
    """Vectorized Newton for f^n(z) = z.  Returns (z, converged, chart_bad)."""
    z = seeds.astype(complex, copy=True)
    chart_bad = ~np.isfinite(z) | (np.abs(z) > _BIG)
    z = np.where(chart_bad, 0.0, z)
    converged = np.zeros(z.shape, dtype=bool)
    active = np.nonzero(~chart_bad)[0]
    for _ in range(_NEWTON_MAX):
        if active.size == 0:
            break
        za = z[active]
        fv, dfv, bad = _orbit_newton_terms(f, za, n)
        stall = (np.abs(dfv) <= 1e-14) & ~bad
        bad |= stall & (np.abs(fv) > 1e-12)
        den = np.where(np.abs(dfv) <= 1e-14, 1.0, dfv)
        step = np.where(bad, 0.0, fv / den)
        cap = 0.5 * (1.0 + np.abs(za))
        mag = np.abs(step)
        scale = np.where(mag > cap, cap / np.maximum(mag, 1e-300), 1.0)
        znew = za - step * scale
        done = ~bad & (mag <= _NEWTON_STEP_TOL * (1.0 + np.abs(znew)))
        z[active] = np.where(bad, za, znew)
        chart_bad[active[bad]] = True
        converged[active[done]] = True
        active = active[~bad & ~done]
    if converged.any():
        idx = np.nonzero(converged)[0]
        for _ in range(2):  # polish to machine accuracy
            fv, dfv, bad = _orbit_newton_terms(f, z[idx], n)
            den = np.where(np.abs(dfv) <= 1e-14, 1.0, dfv)
            upd = z[idx] - np.where(bad, 0.0, fv / den)
            z[idx] = np.where(np.isfinite(upd) & (np.abs(upd) <= _BIG), upd, z[idx])
    return z, converged, chart_bad


def _refine_scalar(f: RationalMap, p: SpherePoint, n: int):
    """Chart-adaptive scalar Newton; fallback for orbits through infinity."""
    cur = p
    for _ in range(_NEWTON_MAX):
        pts = [cur]
        for _ in range(n):
            pts.append(f.eval(pts[-1]))
        c0 = _chart_of(cur)
        charts = [c0] + [_chart_of(q) for q in pts[1:n]] + [c0]
        try:
            deriv = 1.0 + 0j
            for k in range(n):
                deriv *= f.chart_derivative(pts[k], charts[k], charts[k + 1])
            endc = _chart_coord(pts[n], c0)
            zc = _chart_coord(cur, c0)
        except ChartError:
            return cur, False
        df = deriv - 1.0
        if abs(df) <= 1e-14:
            return cur, abs(endc - zc) <= 1e-12
        step = (endc - zc) / df
        mag = abs(step)
        cap = 0.5 * (1.0 + abs(zc))
        if mag > cap:
            step *= cap / mag
        new = zc - step
        if c0 == "z":
            cur = SpherePoint(new)
        else:
            cur = SpherePoint.infinity() if new == 0 else SpherePoint(1.0 / new)
        if mag <= _NEWTON_STEP_TOL * (1.0 + abs(new)):
            return cur, True
    return cur, False


def _node_multiplier_residual(f: RationalMap, p: SpherePoint, n: int):
    try:
        mult = orbit_multiplier(f, p, n)
    except (ChartError, ZeroDivisionError):
        mult = complex("nan")
    cur = p
    for _ in range(n):
        cur = f.eval(cur)
    return mult, chordal_dist(cur, p)


def _substep_continue(fam: Family, lam_a: complex, lam_b: complex, start: SpherePoint, n: int):
    """Bisected continuation along the segment lam_a -> lam_b.

    Returns (point, "ok"|"diverged"|"underflow")."""
    if lam_a == lam_b:
        pt, conv = _refine_scalar(fam.map_at_lambda(lam_b), start, n)
        return (pt, "ok") if conv else (start, "diverged")
    for depth in range(1, _MAX_SUBSTEP_DEPTH + 1):
        steps = 2 ** depth
        if abs(lam_b - lam_a) / steps < _MIN_SUBSTEP:
            return start, "underflow"
        cur = start
        good = True
        for s in range(1, steps + 1):
            lam = lam_a + (lam_b - lam_a) * (s / steps)
            f = fam.map_at_lambda(lam)
            cur, conv = _refine_scalar(f, cur, n)
            if not conv:
                good = False
                break
        if good:
            return cur, "ok"
    return start, "diverged"


def _continue_batch(fam: Family, seeds: Sequence[SpherePoint], n: int) -> list:
    """Continue several period-n points over the whole grid at once.

    Returns per-graph value/multiplier/residual arrays and failure records;
    statuses are assigned by the callers.
    """
    grid = fam.grid
    k, g = grid.node_count, len(seeds)
    order, parent = fam.bfs_order()
    values = np.zeros((k, g), dtype=complex)
    infm = np.zeros((k, g), dtype=bool)
    mults = np.full((k, g), complex("nan"), dtype=complex)
    resid = np.full((k, g), np.inf)
    failed = [[] for _ in range(g)]  # nodes where continuation gave up
    underflow = np.zeros(g, dtype=bool)

    def solve_node(node: int, seed_z: np.ndarray, seed_inf: np.ndarray, lam_a, lam_b):
        f = fam.map_at(node)
        z, conv, chart_bad = _newton_batch(f, np.where(seed_inf, 0.0, seed_z), n)
        fv, dfv, term_bad = _orbit_newton_terms(f, z, n)
        scalar_cols = np.nonzero(seed_inf | chart_bad | term_bad | ~conv)[0]
        mrow = dfv + 1.0
        rrow = np.abs(fv) / np.sqrt((1.0 + np.abs(z) ** 2) * (1.0 + np.abs(z + fv) ** 2))
        irow = np.zeros(g, dtype=bool)
        okrow = conv & ~term_bad & ~chart_bad
        for c in scalar_cols:
            start = SpherePoint.infinity() if seed_inf[c] else SpherePoint(complex(seed_z[c]))
            pt, how = _substep_continue(fam, lam_a, lam_b, start, n)
            if how == "underflow":
                underflow[c] = True
            if how != "ok":
                failed[c].append(node)
                okrow[c] = False
                # park the seed so BFS children still have a starting guess
                values_c, inf_c = (0.0, True) if start.is_inf else (start.z, False)
                z[c], irow[c] = values_c, inf_c
                mrow[c], rrow[c] = complex("nan"), np.inf
                continue
            okrow[c] = True
            z[c] = 0.0 if pt.is_inf else pt.z
            irow[c] = pt.is_inf
            mrow[c], rrow[c] = _node_multiplier_residual(f, pt, n)
        # scalar multiplier for huge finite values the plane formula missed
        for c in np.nonzero(okrow & ~np.isfinite(mrow))[0]:
            mrow[c], rrow[c] = _node_multiplier_residual(f, SpherePoint(complex(z[c])), n)
        return z, irow, mrow, rrow

    base = grid.base_index
    lam0 = complex(grid.nodes[base])
    seed_z = np.array([0.0 if p.is_inf else p.z for p in seeds], dtype=complex)
    seed_inf = np.array([p.is_inf for p in seeds], dtype=bool)
    z, irow, mrow, rrow = solve_node(base, seed_z, seed_inf, lam0, lam0)
    values[base], infm[base], mults[base], resid[base] = z, irow, mrow, rrow
    for node in order[1:]:
        par = parent[node]
        lam_a = complex(grid.nodes[par])
        lam_b = complex(grid.nodes[node])
        z, irow, mrow, rrow = solve_node(node, values[par], infm[par], lam_a, lam_b)
        values[node], infm[node], mults[node], resid[node] = z, irow, mrow, rrow
    return values, infm, mults, resid, failed, underflow


def _graph_status(resid_col, mult_col, failed_nodes, underflowed):
    if underflowed:
        return "broken", tuple(failed_nodes)
    solved = np.isfinite(resid_col)
    if solved.all() and np.max(resid_col) > _RESIDUAL_TOL:
        sloppy = np.nonzero(resid_col > _RESIDUAL_TOL)[0]
        return "broken", tuple(int(i) for i in sloppy)
    if failed_nodes:
        return "nonpersistent", tuple(failed_nodes)
    if np.min(np.abs(mult_col)) <= 1.0:
        crossing = np.nonzero(np.abs(mult_col) <= 1.0)[0]
        return "nonpersistent", tuple(int(i) for i in crossing)
    return "ok", ()


def _graphs_from_batch(fam: Family, seeds, n: int):
    values, infm, mults, resid, failed, underflow = _continue_batch(fam, seeds, n)
    out = []
    for c, p in enumerate(seeds):
        status, frontier = _graph_status(resid[:, c], mults[:, c], failed[c], underflow[c])
        out.append(
            MotionGraph(
                family=fam,
                n=n,
                values=values[:, c].copy(),
                inf_mask=infm[:, c].copy(),
                multipliers=mults[:, c].copy(),
                residuals=resid[:, c].copy(),
                status=status,
                frontier=frontier,
                base_point=p,
            )
        )
    return out


def continue_point(fam: Family, p: PeriodicPoint, margin: float = _DEFAULT_MARGIN) -> MotionGraph:
    """Continue one repelling periodic point across the parameter grid.

    Admission requires multiplier modulus >= 1 + margin at the base; the
    modulus is recomputed from the map rather than trusted from the input.
    """
    if not isinstance(p, PeriodicPoint):
        raise InvalidArgumentError("continue_point expects a PeriodicPoint")
    f0 = fam.base_map()
    base_mult, base_res = _node_multiplier_residual(f0, p.point, p.n)
    if base_res > 1e-6:
        raise InvalidArgumentError("input is not periodic at the base parameter")
    if not np.isfinite(base_mult) or abs(base_mult) < 1.0 + margin:
        raise InvalidArgumentError(
            "point is not repelling with margin %g at the base (|mult| = %g)"
            % (margin, abs(base_mult))
        )
    graph = _graphs_from_batch(fam, [p.point], p.n)[0]
    graph.birkhoff_weight = p.birkhoff_weight
    return graph


# ---------------------------------------------------------------------------
# graph metric, disjointness, tubes


def _check_same_grid(g1: MotionGraph, g2: MotionGraph):
    if not _same_grid(g1.family.grid, g2.family.grid):
        raise InvalidArgumentError("graphs live on different parameter grids")


def graph_distance(g1: MotionGraph, g2: MotionGraph) -> float:
    """Sup over grid nodes of the chordal distance between the two graphs."""
    _check_same_grid(g1, g2)
    return float(np.max(_chordal_arrays(g1.values, g1.inf_mask, g2.values, g2.inf_mask)))


def _graph_lipschitz(g: MotionGraph) -> float:
    grid = g.family.grid
    emb = r3_embed_arrays(g.values, g.inf_mask)
    best = 0.0
    for t in (1, 3):  # right and up neighbors cover every lattice edge once
        nb = grid.neighbors[:, t]
        src = np.nonzero(nb >= 0)[0]
        if src.size == 0:
            continue
        d = 0.5 * np.linalg.norm(emb[src] - emb[nb[src]], axis=-1)
        best = max(best, float(np.max(d)) / grid.mesh)
    return best


def graph_distance_report(g1: MotionGraph, g2: MotionGraph) -> dict:
    """Grid sup distance plus a mesh-inflation bound from finite differences."""
    _check_same_grid(g1, g2)
    d = _chordal_arrays(g1.values, g1.inf_mask, g2.values, g2.inf_mask)
    node = int(np.argmax(d))
    lip = _graph_lipschitz(g1) + _graph_lipschitz(g2)
    dist = float(d[node])
    return {
        "distance": dist,
        "argmax_node": node,
        "lipschitz_estimate": lip,
        "inflation": lip * g1.family.grid.mesh,
        "certified_upper": dist + lip * g1.family.grid.mesh,
    }


def disjointness_check(graphs: Sequence[MotionGraph], collision_tol: float = 1e-8) -> dict:
    """Pairwise pointwise-minimum distances; pairs below tolerance listed."""
    if len(graphs) < 2:
        raise InvalidArgumentError("disjointness needs at least two graphs")
    for g in graphs[1:]:
        _check_same_grid(graphs[0], g)
    emb = np.stack([r3_embed_arrays(g.values, g.inf_mask) for g in graphs])
    n = len(graphs)
    min_pair = math.inf
    argmin = (0, 1)
    collisions = []
    for i in range(n - 1):
        d = 0.5 * np.linalg.norm(emb[i + 1 :] - emb[i][None], axis=-1)
        per_pair = d.min(axis=1)
        j = int(np.argmin(per_pair))
        if per_pair[j] < min_pair:
            min_pair = float(per_pair[j])
            argmin = (i, i + 1 + j)
        for jj in np.nonzero(per_pair < collision_tol)[0]:
            collisions.append((i, i + 1 + int(jj)))
    return {"min_pairwise": min_pair, "argmin_pair": argmin, "colliding_pairs": collisions}


@dataclass(frozen=True)
class Tube:
    """Uniform chordal neighborhood of a motion graph over the whole grid."""

    center: MotionGraph
    radius: float

    def __post_init__(self):
        if not (self.radius > 0):
            raise InvalidArgumentError("tube radius must be positive")


def tube_membership(tube: Tube, g: MotionGraph) -> bool:
    return graph_distance(tube.center, g) < tube.radius


# ---------------------------------------------------------------------------
# web measures


@dataclass
class WebMeasure:
    """Weighted atoms on the space of motion graphs of one period."""

    graphs: list
    masses: np.ndarray
    n: int
    pressure: float
    weight: Weight
    lost_mass: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def slice(self, lam: complex) -> DiscreteMeasure:
        """Discrete measure on the sphere at one grid node."""
        node = self.graphs[0].family.grid.node_of(complex(lam)) if self.graphs else None
        if node is None:
            raise MotionlabError("web measure has no atoms")
        z = np.array([g.values[node] for g in self.graphs], dtype=complex)
        inf = np.array([g.inf_mask[node] for g in self.graphs], dtype=bool)
        return DiscreteMeasure(z, inf, self.masses.copy())

    def to_json_obj(self) -> dict:
        return {
            "n": self.n,
            "pressure": self.pressure,
            "weight": self.weight.to_json_obj(),
            "total_mass": self.total_mass,
            "lost_mass": dict(self.lost_mass),
            "atoms": [
                {"mass": float(m), "graph": g.to_json_obj()}
                for m, g in zip(self.masses, self.graphs)
            ],
        }


def build_web_measure(
    fam: Family,
    w: Weight,
    n: int,
    pressure: float,
    margin: float = _DEFAULT_MARGIN,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    points: Optional[list] = None,
) -> WebMeasure:
    """One atom per persistent everywhere-repelling period-n graph.

    Atom mass is exp(S_n phi - n P) evaluated at the base parameter.  Mass
    carried by points that fail admission (not repelling, inside the
    multiplier margin band, undetermined) or whose continuation fails is
    accumulated in lost_mass by reason.
    """
    f0 = fam.base_map()
    if points is None:
        points = periodic_points(f0, n, budget=budget, seed=seed)
    annotate_cycle_weights(f0, w, points, n, pressure)
    lost = {"nonrepelling": 0.0, "undetermined": 0.0, "margin": 0.0, "nonpersistent": 0.0, "broken": 0.0}
    admitted = []
    for p in points:
        carried = p.mass * p.multiplicity
        if p.status == "undetermined":
            lost["undetermined"] += carried
        elif p.status != "repelling":
            lost["nonrepelling"] += carried
        elif abs(p.multiplier) < 1.0 + margin:
            lost["margin"] += carried
        else:
            admitted.append(p)
    graphs = _graphs_from_batch(fam, [p.point for p in admitted], n) if admitted else []
    kept, masses = [], []
    dropped = {"nonpersistent": 0, "broken": 0}
    for p, g in zip(admitted, graphs):
        if g.status == "ok":
            g.birkhoff_weight = p.birkhoff_weight
            kept.append(g)
            masses.append(p.mass * p.multiplicity)
        else:
            lost[g.status] += p.mass * p.multiplicity
            dropped[g.status] += 1
    return WebMeasure(
        graphs=kept,
        masses=np.array(masses, dtype=float),
        n=n,
        pressure=float(pressure),
        weight=w,
        lost_mass=lost,
        diagnostics={
            "total_points": sum(p.multiplicity for p in points),
            "admitted": len(admitted),
            "kept": len(kept),
            "dropped": dropped,
            "margin": margin,
        },
    )


def slice_invariance_defect(web: WebMeasure, lam: complex) -> dict:
    """Compare the slice at lam with its own pushforward under the map there.

    The web's graphs permute under the family map, so the slice must be
    carried to itself atom by atom; reports the worst atom mismatch.
    """
    if not web.graphs:
        raise MotionlabError("web measure has no atoms")
    grid = web.graphs[0].family.grid
    node = grid.node_of(complex(lam))
    mu = web.slice(lam)
    nu = mu.pushforward(web.graphs[0].family.map_at(node))
    if mu.atom_count != nu.atom_count:
        return {"position": math.inf, "mass": math.inf, "atoms": mu.atom_count}
    a = r3_embed_arrays(mu.z, mu.inf)
    b = r3_embed_arrays(nu.z, nu.inf)
    dist = 0.5 * np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    col = np.argmin(dist, axis=1)
    return {
        "position": float(np.max(dist[np.arange(len(col)), col])),
        "mass": float(np.max(np.abs(mu.mass - nu.mass[col]))),
        "atoms": mu.atom_count,
    }


# ---------------------------------------------------------------------------
# backward branches over a tube


def _chordal_ring(anchors: np.ndarray, eta: float, count: int) -> np.ndarray:
    """count points at exact chordal distance eta around each finite anchor."""
    ang = np.exp(2j * np.pi * (np.arange(count) + 0.5) / count)
    a = anchors[:, None]
    r = eta * (1.0 + np.abs(a) ** 2) * np.ones((anchors.size, count))
    for _ in range(8):
        r = eta * np.sqrt((1.0 + np.abs(a) ** 2) * (1.0 + np.abs(a + r * ang[None, :]) ** 2))
    return a + r * ang[None, :]


def _select_nearest(fib, finf, ref_z, ref_inf):
    """Per row: index of the fiber point nearest to the reference, with the
    ratio of nearest to second-nearest distances (1.0 when d == 1)."""
    d = _chordal_arrays(fib, finf, ref_z[:, None], ref_inf[:, None])
    order = np.argsort(d, axis=1)
    j = order[:, 0]
    d1 = np.take_along_axis(d, order, axis=1)[:, 0]
    if d.shape[1] > 1:
        d2 = np.take_along_axis(d, order, axis=1)[:, 1]
        ratio = d1 / np.maximum(d2, 1e-300)
    else:
        ratio = np.zeros_like(d1)
    return j, ratio


def contraction_report(
    fam: Family,
    tube: Tube,
    depth: int,
    branch_samples: int = 200,
    seed: int = 0,
    slope_bound: Optional[float] = None,
    boundary_samples: int = 16,
) -> dict:
    """Per-level diameters of random backward branches over the tube.

    Each branch follows one random inverse image of the tube center, level
    by level, continued across the whole parameter grid by nearest-fiber
    selection against the base-parameter chain.  Level diameter is twice
    the largest chordal distance from the continued boundary ring to the
    branch anchor, maximized over parameter nodes.  A branch whose fiber
    selection becomes ambiguous anywhere is dropped and counted.

    slope_bound defaults to 0.8 times a quick Lyapunov estimate at the
    base; a branch is "good" when its fitted log-diameter slope is at or
    below minus that bound.
    """
    if depth < 1:
        raise InvalidArgumentError("depth must be >= 1")
    center = tube.center
    if center.inf_mask.any():
        raise InvalidArgumentError("tube center through infinity is not supported")
    grid = fam.grid
    d = fam.degree
    b, m = branch_samples, boundary_samples
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, d, size=(b, depth))
    base_chain = np.zeros((b, depth + 1), dtype=complex)
    base_inf = np.zeros((b, depth + 1), dtype=bool)
    diam = np.zeros((b, depth + 1))
    alive = np.ones(b, dtype=bool)
    node_order = [grid.base_index] + [k for k in range(grid.node_count) if k != grid.base_index]
    for node in node_order:
        f = fam.map_at(node)
        anchors = np.full(b, complex(center.values[node]))
        ainf = np.zeros(b, dtype=bool)
        ring = _chordal_ring(anchors, tube.radius, m)
        ring_inf = np.zeros((b, m), dtype=bool)
        level_rad = _chordal_arrays(ring, ring_inf, anchors[:, None], ainf[:, None]).max(axis=1)
        diam[:, 0] = np.maximum(diam[:, 0], 2.0 * level_rad)
        at_base = node == grid.base_index
        for l in range(depth):
            fib, finf = preimage_fibers(f, anchors, ainf)
            if at_base:
                sel = picks[:, l]
                base_chain[:, l + 1] = fib[np.arange(b), sel]
                base_inf[:, l + 1] = finf[np.arange(b), sel]
                nxt, ninf = base_chain[:, l + 1].copy(), base_inf[:, l + 1].copy()
            else:
                j, ratio = _select_nearest(fib, finf, base_chain[:, l + 1], base_inf[:, l + 1])
                alive &= ratio <= _AMBIGUITY_RATIO
                nxt = fib[np.arange(b), j]
                ninf = finf[np.arange(b), j]
            rfib, rfinf = preimage_fibers(f, ring.ravel(), ring_inf.ravel())
            rd = _chordal_arrays(
                rfib.reshape(b, m, d),
                rfinf.reshape(b, m, d),
                nxt[:, None, None],
                ninf[:, None, None],
            )
            jr = np.argmin(rd, axis=2)
            ring = np.take_along_axis(rfib.reshape(b, m, d), jr[:, :, None], axis=2)[:, :, 0]
            ring_inf = np.take_along_axis(rfinf.reshape(b, m, d), jr[:, :, None], axis=2)[:, :, 0]
            anchors, ainf = nxt, ninf
            level_rad = _chordal_arrays(ring, ring_inf, anchors[:, None], ainf[:, None]).max(axis=1)
            diam[:, l + 1] = np.maximum(diam[:, l + 1], 2.0 * level_rad)
    if slope_bound is None:
        slope_bound = 0.8 * _lyapunov_estimate_at(fam.base_map(), center.value_at(grid.base_index), seed)
    levels = np.arange(depth + 1, dtype=float)
    logs = np.log(np.maximum(diam, 1e-300))
    fit = np.polyfit(levels, logs.T, 1)
    slopes = fit[0]
    good = alive & (slopes <= -slope_bound)
    n_alive = int(np.count_nonzero(alive))
    return {
        "slope_bound": float(slope_bound),
        "tube_radius": tube.radius,
        "depth": depth,
        "diameters": diam,
        "slopes": slopes,
        "alive": alive,
        "dropped": int(b - n_alive),
        "good_fraction": float(np.count_nonzero(good) / n_alive) if n_alive else 0.0,
        "base_chains": (base_chain, base_inf),
    }


def sample_branch_pair(fam: Family, start1: SpherePoint, start2: SpherePoint, depth: int, seed: int = 0):
    """Two backward chains at the base parameter following one common branch.

    The first chain picks a random fiber index at each level; the second
    follows the fiber point nearest to the first chain's choice, so both
    stay in the same per-level neighborhoods.
    """
    f = fam.base_map()
    rng = np.random.default_rng(seed)
    z = np.array([start1.z if not start1.is_inf else 0.0, start2.z if not start2.is_inf else 0.0], dtype=complex)
    inf = np.array([start1.is_inf, start2.is_inf], dtype=bool)
    vals = np.zeros((2, depth + 1), dtype=complex)
    infs = np.zeros((2, depth + 1), dtype=bool)
    vals[:, 0], infs[:, 0] = z, inf
    for l in range(depth):
        fib, finf = preimage_fibers(f, vals[:, l], infs[:, l])
        k = int(rng.integers(0, fam.degree))
        vals[0, l + 1], infs[0, l + 1] = fib[0, k], finf[0, k]
        dsel = _chordal_arrays(fib[1], finf[1], np.full(fam.degree, vals[0, l + 1]), np.full(fam.degree, infs[0, l + 1]))
        j = int(np.argmin(dsel))
        vals[1, l + 1], infs[1, l + 1] = fib[1, j], finf[1, j]
    return (vals[0], infs[0]), (vals[1], infs[1])


def _as_chain(chain):
    if isinstance(chain, tuple) and len(chain) == 2:
        return np.asarray(chain[0], dtype=complex), np.asarray(chain[1], dtype=bool)
    arr = np.asarray(chain, dtype=complex)
    return arr, np.zeros(arr.shape, dtype=bool)


def distortion_sum(fam: Family, w: Weight, branch1, branch2, depth: Optional[int] = None) -> float:
    """Sum over levels of |phi(branch1_l) - phi(branch2_l)| at the base.

    Branches are chains as returned by sample_branch_pair or the base
    chains of contraction_report; the first `depth` levels are summed.
    """
    if fam is None:
        raise InvalidArgumentError("family is required")
    z1, i1 = _as_chain(branch1)
    z2, i2 = _as_chain(branch2)
    if z1.shape != z2.shape:
        raise InvalidArgumentError("branches have different lengths")
    n = z1.shape[0] if depth is None else min(int(depth), z1.shape[0])
    v1 = w.eval_arrays(z1[:n], i1[:n])
    v2 = w.eval_arrays(z2[:n], i2[:n])
    return float(np.sum(np.abs(v1 - v2)))


# ---------------------------------------------------------------------------
# Lyapunov map over the parameter grid


@dataclass
class ParamGridFunction:
    """Real values over the nodes of a parameter grid, with per-node flags."""

    grid: ParamGrid
    values: np.ndarray
    flags: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_bounding_array(self) -> np.ndarray:
        out = np.full(self.grid.shape, np.nan)
        out[self.grid.rows, self.grid.cols] = self.values
        return out


def _log_spherical_deriv(f: RationalMap, z: np.ndarray, inf: np.ndarray):
    """log of the spherical derivative norm; nan where degenerate."""
    out = np.full(z.shape, np.nan)
    finite = ~inf & (np.abs(z) <= _BIG)
    if finite.any():
        zf = z[finite]
        nv = _polyval(f.num, zf)
        dv = _polyval(f.den, zf)
        npv = _polyval(f.dnum, zf)
        dpv = _polyval(f.dden, zf)
        ok = np.abs(dv) > 1e-280
        val = np.where(ok, nv / np.where(ok, dv, 1.0), np.inf)
        der = np.where(ok, (npv * dv - nv * dpv) / np.where(ok, dv * dv, 1.0), np.nan)
        mag = np.abs(der) * (1.0 + np.abs(zf) ** 2) / (1.0 + np.abs(val) ** 2)
        res = np.where(ok & np.isfinite(mag) & (mag > 0), np.log(np.maximum(mag, 1e-300)), np.nan)
        out[finite] = res
    for idx in np.nonzero(~finite)[0]:
        p = SpherePoint.infinity() if inf[idx] else SpherePoint(complex(z[idx]))
        try:
            mag = f.spherical_derivative(p)
            out[idx] = math.log(mag) if mag > 0 else math.nan
        except (ChartError, ValueError):
            out[idx] = math.nan
    return out


def _lyapunov_estimate_at(f: RationalMap, start: SpherePoint, seed: int, depth: int = 8, samples: int = 64) -> float:
    """Quick Lyapunov estimate from backward-orbit endpoints at one map."""
    rng = np.random.default_rng(seed)
    z = np.full(samples, 0.0 if start.is_inf else start.z, dtype=complex)
    inf = np.full(samples, start.is_inf, dtype=bool)
    for _ in range(depth):
        fib, finf = preimage_fibers(f, z, inf)
        pick = rng.integers(0, f.degree, size=samples)
        z = fib[np.arange(samples), pick]
        inf = finf[np.arange(samples), pick]
    vals = _log_spherical_deriv(f, z, inf)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise MotionlabError("Lyapunov estimate degenerate at the base")
    return float(np.mean(vals))


def lyapunov_map(
    fam: Family,
    depth: int = 12,
    samples: int = 256,
    seed: int = 0,
    center_graph: Optional[MotionGraph] = None,
    margin: float = _DEFAULT_MARGIN,
) -> ParamGridFunction:
    """Lyapunov exponent estimate at every parameter node.

    Backward walks of the given depth start from a continued repelling
    fixed point; the node value is the mean log spherical derivative over
    walk endpoints.  The fiber choices are drawn once and reused at every
    node, and each walk is continued across nodes by nearest-fiber
    selection against its base chain, so the estimate varies smoothly in
    the parameter wherever the walks themselves do.  Nodes where a
    selection was ambiguous or the derivative degenerate are flagged.
    """
    if depth < 1 or samples < 1:
        raise InvalidArgumentError("depth and samples must be >= 1")
    grid = fam.grid
    if center_graph is None:
        f0 = fam.base_map()
        cands = [p for p in periodic_points(f0, 1) if p.repelling and abs(p.multiplier) >= 1.0 + margin]
        if not cands:
            raise MotionlabError("no repelling fixed point with margin to anchor the walks")
        cands.sort(key=lambda p: p.point.sort_key())
        center_graph = continue_point(fam, cands[0], margin=margin)
    if not _same_grid(center_graph.family.grid, grid):
        raise InvalidArgumentError("center graph lives on a different grid")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, fam.degree, size=(samples, depth))
    base_chain = np.zeros((samples, depth + 1), dtype=complex)
    base_inf = np.zeros((samples, depth + 1), dtype=bool)
    values = np.zeros(grid.node_count)
    flags = np.zeros(grid.node_count, dtype=bool)
    ambiguous = np.zeros(grid.node_count, dtype=int)
    node_order = [grid.base_index] + [k for k in range(grid.node_count) if k != grid.base_index]
    for node in node_order:
        f = fam.map_at(node)
        if center_graph.inf_mask[node]:
            flags[node] = True
            values[node] = math.nan
            continue
        z = np.full(samples, complex(center_graph.values[node]), dtype=complex)
        inf = np.zeros(samples, dtype=bool)
        at_base = node == grid.base_index
        if at_base:
            base_chain[:, 0], base_inf[:, 0] = z, inf
        for l in range(depth):
            fib, finf = preimage_fibers(f, z, inf)
            if at_base:
                sel = picks[:, l]
                z = fib[np.arange(samples), sel]
                inf = finf[np.arange(samples), sel]
                base_chain[:, l + 1], base_inf[:, l + 1] = z, inf
            else:
                j, ratio = _select_nearest(fib, finf, base_chain[:, l + 1], base_inf[:, l + 1])
                ambiguous[node] += int(np.count_nonzero(ratio > _AMBIGUITY_RATIO))
                z = fib[np.arange(samples), j]
                inf = finf[np.arange(samples), j]
        vals = _log_spherical_deriv(f, z, inf)
        good = np.isfinite(vals)
        if not good.all():
            flags[node] = True
        values[node] = float(np.mean(vals[good])) if good.any() else math.nan
    return ParamGridFunction(
        grid=grid,
        values=values,
        flags=flags,
        meta={
            "depth": depth,
            "samples": samples,
            "seed": seed,
            "ambiguous_selections": ambiguous,
            "anchor_period": center_graph.n,
        },
    )


def harmonicity_defect(lfun: ParamGridFunction) -> dict:
    """Five-point discrete Laplacian of a parameter-grid function.

    Interior nodes are those whose four lattice neighbors exist in the
    disk and are unflagged (and are themselves unflagged).  The defect map
    carries |Laplacian| at interior nodes and NaN elsewhere.
    """
    grid = lfun.grid
    h = grid.mesh
    defect = np.full(grid.node_count, np.nan)
    interior = np.zeros(grid.node_count, dtype=bool)
    for k in range(grid.node_count):
        nb = grid.neighbors[k]
        if np.any(nb < 0) or lfun.flags[k] or np.any(lfun.flags[nb]):
            continue
        lap = (np.sum(lfun.values[nb]) - 4.0 * lfun.values[k]) / (h * h)
        defect[k] = abs(lap)
        interior[k] = True
    count = int(np.count_nonzero(interior))
    vals = defect[interior]
    return {
        "defect": ParamGridFunction(grid=grid, values=defect, flags=~interior, meta={"mesh": h}),
        "interior_count": count,
        "max_abs_interior": float(np.max(vals)) if count else math.nan,
        "mean_abs_interior": float(np.mean(vals)) if count else math.nan,
    }
