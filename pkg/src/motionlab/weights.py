"""Weight functions: Gaussian kernel mixtures in the chordal metric.

phi(z) = sum_i a_i * exp(-(chordal(z, center_i)/b_i)^2).  The family is
closed under scaling, has a closed-form Lipschitz constant, and an empty
term list is phi = 0.  These are the only weights the package certifies:
the gap condition needs a guaranteed upper bound on the oscillation, and
mesh inflation by an explicit Lipschitz constant provides one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .grid import SphereGrid, build_grid
from .sphere import SpherePoint, chordal_dist_arrays

# max slope of a*exp(-(t/b)^2) in t is |a|*sqrt(2)/(b*sqrt(e))
_SLOPE = math.sqrt(2.0) / math.sqrt(math.e)


@dataclass(frozen=True)
class KernelTerm:
    center: SpherePoint
    a: float
    b: float

    def __post_init__(self):
        if not (self.b > 0):
            raise InvalidArgumentError("kernel width must be > 0")
        if not math.isfinite(self.a) or not math.isfinite(self.b):
            raise InvalidArgumentError("kernel parameters must be finite")


@dataclass(frozen=True)
class Weight:
    terms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    def eval_arrays(self, z, inf_mask) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        inf_mask = np.asarray(inf_mask, dtype=bool)
        out = np.zeros(z.shape, dtype=float)
        for t in self.terms:
            d = chordal_dist_arrays(
                z, inf_mask, np.full(z.shape, t.center.z), np.full(z.shape, t.center.is_inf)
            )
            out += t.a * np.exp(-((d / t.b) ** 2))
        return out

    def eval(self, p: SpherePoint) -> float:
        return float(
            self.eval_arrays(np.array([p.z]), np.array([p.is_inf]))[0]
        )

    def lipschitz_bound(self) -> float:
        return sum(abs(t.a) * _SLOPE / t.b for t in self.terms)

    def sup_bound(self) -> float:
        return sum(abs(t.a) for t in self.terms)

    def scaled(self, c: float) -> "Weight":
        return Weight(tuple(KernelTerm(t.center, c * t.a, t.b) for t in self.terms))

    def shifted(self, c: float) -> "Weight":
        """phi + c, realized by a constant kernel (zero-centered, huge width)."""
        if c == 0.0:
            return self
        return Weight(self.terms + (KernelTerm(SpherePoint(0j), c, 1e9),))

    def to_json_obj(self) -> list:
        out = []
        for t in self.terms:
            center = "inf" if t.center.is_inf else [t.center.z.real, t.center.z.imag]
            out.append({"center": center, "a": t.a, "b": t.b})
        return out

    @staticmethod
    def from_json_obj(obj: list) -> "Weight":
        terms = []
        for row in obj:
            c = row["center"]
            center = SpherePoint.infinity() if c == "inf" else SpherePoint(complex(c[0], c[1]))
            terms.append(KernelTerm(center, float(row["a"]), float(row["b"])))
        return Weight(tuple(terms))


def zero_weight() -> Weight:
    return Weight(())


def bump_weight(a: float, b: float, center: SpherePoint = SpherePoint(0j)) -> Weight:
    return Weight((KernelTerm(center, a, b),))


def oscillation(w: Weight, grid_resolution: int, grid: SphereGrid | None = None) -> float:
    """Certified upper bound on max(phi) - min(phi).

    Grid range plus Lip(phi) * mesh; mesh is the grid's covering diameter,
    so the true extrema can exceed the sampled ones by at most
    Lip * mesh / 2 each.
    """
    if grid_resolution < 64:
        raise InvalidArgumentError("oscillation needs grid_resolution >= 64")
    if not w.terms:
        return 0.0
    g = grid if grid is not None else build_grid(grid_resolution)
    vals = w.eval_arrays(g.z, g.inf_mask)
    return float(vals.max() - vals.min()) + w.lipschitz_bound() * g.mesh


def logq_norm_bound(w: Weight, q: float) -> float:
    """Upper bound on sup |phi(x)-phi(y)| * (1 + |log dist|)^q over pairs.

    |delta phi| <= Lip * t at chordal distance t, and t * (1 - log t)^q on
    (0, 1] peaks at t = e^{1-q}; a log-spaced distance grid plus the exact
    maximizer make the reported sup certified for the Lipschitz envelope.
    """
    lip = w.lipschitz_bound()
    ts = np.logspace(-12, 0, 400)
    ts = np.append(ts, math.exp(1.0 - q))
    vals = lip * ts * (1.0 + np.abs(np.log(ts))) ** q
    return float(np.max(vals))


def check_condition_B(w: Weight, d: int, q: float, grid_resolution: int = 4096) -> dict:
    """Gap condition: certified oscillation below log(degree), q > 2."""
    if d < 2:
        raise InvalidArgumentError("degree must be >= 2")
    if not q > 2:
        raise InvalidArgumentError("condition (B) requires q > 2")
    omega = oscillation(w, grid_resolution)
    bound = math.log(d)
    return {
        "omega": omega,
        "bound": bound,
        "logq_norm_bound": logq_norm_bound(w, q),
        "passes": bool(omega < bound),
    }
