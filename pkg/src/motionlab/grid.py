"""Quasi-uniform sphere grids and functions sampled on them.

The grid is two stereographic square caps: chart coordinates on [-1, 1]^2
in the z chart (covers |z| <= 1) and in the w = 1/z chart (covers
|z| >= 1).  Lattice corners at spacing h = 2/N with N a power of two, so
doubling the resolution yields a nested grid; grid extrema are then
monotone under refinement, which the certified oscillation bound relies
on.

Quadrature weights are h^2 / (pi (1 + |c|^2)^2) at nodes whose chart
modulus keeps them in their own cap (|c| <= 1 in the z cap, |c| < 1 in
the w cap, so the seam circle is counted once); remaining "fringe" nodes
get weight zero but stay available as interpolation sources.  Weights are
normalized to total exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy import sparse

from .errors import InvalidArgumentError
from .sphere import r3_embed_arrays

_MIN_SIDE = 8


def _side_for_resolution(resolution: int) -> int:
    n = _MIN_SIDE
    while 2 * n * n < resolution:
        n *= 2
    return n


@dataclass
class SphereGrid:
    """Node set covering the sphere, with quadrature weights.

    mesh is a certified covering diameter: every point of the sphere lies
    within mesh/2 (chordal) of some node.
    """

    resolution: int
    side: int
    h: float
    mesh: float
    chart: np.ndarray
    coord: np.ndarray
    z: np.ndarray
    inf_mask: np.ndarray
    quad_weight: np.ndarray
    _tree: Optional[cKDTree] = field(default=None, repr=False, compare=False)
    _transfer_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def node_count(self) -> int:
        return self.z.shape[0]

    def kdtree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(r3_embed_arrays(self.z, self.inf_mask))
        return self._tree

    def interp_matrix(self, z, inf_mask, k: int = 4) -> sparse.csr_matrix:
        """Rows of inverse-distance weights over the k nearest nodes.

        Row sums are exactly normalized to 1, so constants interpolate
        exactly.  A query point sitting on a node (distance < 1e-12)
        snaps to it.
        """
        z = np.asarray(z, dtype=complex)
        inf_mask = np.asarray(inf_mask, dtype=bool)
        pts = r3_embed_arrays(z, inf_mask)
        dist, idx = self.kdtree().query(pts, k=k)
        if k == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        snap = dist[:, 0] < 1e-12
        with np.errstate(divide="ignore"):
            wts = 1.0 / (dist * dist + (1e-6 * self.h) ** 2)
        wts[snap] = 0.0
        wts[snap, 0] = 1.0
        wts = wts / np.sum(wts, axis=1, keepdims=True)
        n = z.shape[0]
        rows = np.repeat(np.arange(n), k)
        mat = sparse.csr_matrix(
            (wts.ravel(), (rows, idx.ravel())), shape=(n, self.node_count)
        )
        return mat

    def interpolate(self, values: np.ndarray, z, inf_mask) -> np.ndarray:
        return self.interp_matrix(z, inf_mask) @ np.asarray(values, dtype=float)


def build_grid(resolution: int) -> SphereGrid:
    if resolution < 64:
        raise InvalidArgumentError("grid resolution must be >= 64")
    n = _side_for_resolution(resolution)
    h = 2.0 / n
    axis = -1.0 + h * np.arange(n + 1)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    c = (xx + 1j * yy).ravel()
    mod = np.abs(c)

    # z cap
    z1 = c.copy()
    inf1 = np.zeros(c.shape, dtype=bool)
    w1 = np.where(mod <= 1.0, h * h / (math.pi * (1.0 + mod**2) ** 2), 0.0)

    # w cap (w = 1/z); w = 0 is the point at infinity
    inf2 = c == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z2 = np.where(inf2, 0j, 1.0 / np.where(inf2, 1.0, c))
    w2 = np.where(mod < 1.0, h * h / (math.pi * (1.0 + mod**2) ** 2), 0.0)

    chart = np.concatenate([np.zeros(c.size, dtype=np.uint8), np.ones(c.size, dtype=np.uint8)])
    coord = np.concatenate([c, c])
    z = np.concatenate([z1, z2])
    inf_mask = np.concatenate([inf1, inf2])
    quad = np.concatenate([w1, w2])
    quad = quad / np.sum(quad)

    return SphereGrid(
        resolution=resolution,
        side=n,
        h=h,
        mesh=h * math.sqrt(2.0),
        chart=chart,
        coord=coord,
        z=z,
        inf_mask=inf_mask,
        quad_weight=quad,
    )


@dataclass
class GridFunction:
    """Real-valued function sampled at the nodes of a SphereGrid."""

    grid: SphereGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.node_count,):
            raise InvalidArgumentError("value array does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("grid function values must be finite")

    @staticmethod
    def constant(grid: SphereGrid, value: float) -> "GridFunction":
        return GridFunction(grid, np.full(grid.node_count, float(value)))

    def at(self, z, inf_mask) -> np.ndarray:
        return self.grid.interpolate(self.values, z, inf_mask)

    def integral(self) -> float:
        return float(np.dot(self.grid.quad_weight, self.values))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))
