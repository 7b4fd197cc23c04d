"""Riemann sphere arithmetic: points, chordal metric, rational maps.

Conventions used everywhere in the package:

* polynomial coefficient arrays are complex, constant term first, matching
  the JSON wire format;
* any evaluation that could leave the unit disk switches to the chart
  w = 1/z, so Horner is only ever run at arguments of modulus <= 1;
* point equality means chordal distance <= EQUALITY_TOL, never bit equality;
* point lists are ordered lexicographically by (re, im) with the point at
  infinity last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ChartError,
    DegenerateMapError,
    InvalidArgumentError,
    RootFindingError,
)

EQUALITY_TOL = 1e-9

# Relative threshold below which a leading coefficient is treated as an
# exact zero (degree deficiency -> preimages at infinity).
_COEFF_ZERO_RTOL = 1e-13

# Chordal radius within which a cluster of computed roots is reported as
# one root with multiplicity.  Double roots in float64 are only located to
# about sqrt(machine eps), so this sits well above that and well below any
# separation the package's maps actually exhibit.
_MULTIPLICITY_TOL = 3e-6


# ---------------------------------------------------------------------------
# points


@dataclass(frozen=True)
class SpherePoint:
    """A point of the Riemann sphere: a finite complex number or infinity."""

    z: complex
    is_inf: bool = False

    def __post_init__(self):
        if self.is_inf:
            object.__setattr__(self, "z", 0j)
        else:
            z = complex(self.z)
            if not (math.isfinite(z.real) and math.isfinite(z.imag)):
                raise InvalidArgumentError(
                    "finite SpherePoint needs finite components; "
                    "use SpherePoint.infinity() for the point at infinity"
                )
            object.__setattr__(self, "z", z)

    @staticmethod
    def finite(z: complex) -> "SpherePoint":
        return SpherePoint(complex(z))

    @staticmethod
    def infinity() -> "SpherePoint":
        return SpherePoint(0j, True)

    @staticmethod
    def from_ratio(a: complex, b: complex) -> "SpherePoint":
        """Point a/b in projective coordinates.  (0, 0) is rejected."""
        if b == 0:
            if a == 0:
                raise InvalidArgumentError("projective point (0, 0)")
            return SpherePoint.infinity()
        q = a / b
        if math.isfinite(q.real) and math.isfinite(q.imag):
            return SpherePoint(q)
        return SpherePoint.infinity()

    def to_r3(self) -> tuple[float, float, float]:
        """Embedding into the unit sphere of R^3; infinity is the north pole."""
        if self.is_inf:
            return (0.0, 0.0, 1.0)
        x, y = self.z.real, self.z.imag
        if abs(self.z) > 1.0:
            w = 1.0 / self.z
            s = 1.0 + abs(w) ** 2
            return (2.0 * w.real / s, -2.0 * w.imag / s, (1.0 - abs(w) ** 2) / s)
        s = 1.0 + x * x + y * y
        return (2.0 * x / s, 2.0 * y / s, (x * x + y * y - 1.0) / s)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpherePoint):
            return NotImplemented
        return chordal_dist(self, other) <= EQUALITY_TOL

    __hash__ = None  # tolerance-based equality is not hashable

    def sort_key(self) -> tuple[float, float]:
        if self.is_inf:
            return (math.inf, 0.0)
        return (self.z.real, self.z.imag)

    def __repr__(self) -> str:
        if self.is_inf:
            return "SpherePoint(inf)"
        return f"SpherePoint({self.z!r})"


def chordal_dist(p: SpherePoint, q: SpherePoint) -> float:
    """Chordal metric |p - q| / sqrt((1+|p|^2)(1+|q|^2)), diameter 1."""
    if p.is_inf and q.is_inf:
        return 0.0
    if p.is_inf:
        return 1.0 / math.hypot(1.0, abs(q.z))
    if q.is_inf:
        return 1.0 / math.hypot(1.0, abs(p.z))
    a, b = p.z, q.z
    # |a - b| can overflow when both moduli are near the float ceiling;
    # the metric is invariant under z -> 1/z so invert in that regime.
    if abs(a) > 1.0 and abs(b) > 1.0:
        a, b = 1.0 / a, 1.0 / b
    return abs(a - b) / (math.hypot(1.0, abs(a)) * math.hypot(1.0, abs(b)))


def chordal_dist_arrays(z1, inf1, z2, inf2):
    """Vectorized chordal distance for (values, inf-mask) pairs."""
    z1 = np.asarray(z1, dtype=complex)
    z2 = np.asarray(z2, dtype=complex)
    inf1 = np.broadcast_to(np.asarray(inf1, dtype=bool), z1.shape)
    inf2 = np.broadcast_to(np.asarray(inf2, dtype=bool), z2.shape)
    z1, z2 = np.broadcast_arrays(z1, z2)
    inf1, inf2 = np.broadcast_arrays(inf1, inf2)

    a = np.where(inf1, 0.0, z1)
    b = np.where(inf2, 0.0, z2)
    swap = (np.abs(a) > 1.0) & (np.abs(b) > 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(swap, 1.0 / np.where(swap, a, 1.0), a)
        b = np.where(swap, 1.0 / np.where(swap, b, 1.0), b)
    d = np.abs(a - b) / (np.hypot(1.0, np.abs(a)) * np.hypot(1.0, np.abs(b)))

    d = np.where(inf1 & inf2, 0.0, d)
    only1 = inf1 & ~inf2
    only2 = inf2 & ~inf1
    d = np.where(only1, 1.0 / np.hypot(1.0, np.abs(z2)), d)
    d = np.where(only2, 1.0 / np.hypot(1.0, np.abs(z1)), d)
    return d


def r3_embed_arrays(z, inf_mask):
    """Vectorized R^3 embedding; returns an (..., 3) float array.

    Euclidean distance in this embedding is exactly twice the chordal
    distance, which is what makes KD-tree queries usable for chordal
    nearest neighbors.
    """
    z = np.asarray(z, dtype=complex)
    inf_mask = np.broadcast_to(np.asarray(inf_mask, dtype=bool), z.shape)
    big = (np.abs(z) > 1.0) & ~inf_mask
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(big, 1.0 / np.where(big, z, 1.0), z)
    t = np.abs(w) ** 2
    s = 1.0 + t
    out = np.empty(z.shape + (3,), dtype=float)
    out[..., 0] = 2.0 * w.real / s
    out[..., 1] = np.where(big, -2.0 * w.imag / s, 2.0 * w.imag / s)
    out[..., 2] = np.where(big, (1.0 - t) / s, (t - 1.0) / s)
    out[inf_mask] = (0.0, 0.0, 1.0)
    return out


def sort_points(points: Iterable[SpherePoint]) -> list[SpherePoint]:
    return sorted(points, key=SpherePoint.sort_key)


# ---------------------------------------------------------------------------
# polynomial helpers (coefficients constant-first)


def _strip_high(coeffs: np.ndarray) -> np.ndarray:
    """Drop trailing (high-order) coefficients that are relatively zero."""
    c = np.asarray(coeffs, dtype=complex)
    if c.size == 0:
        return c
    scale = np.max(np.abs(c))
    if scale == 0.0:
        return c[:1] * 0.0
    keep = np.nonzero(np.abs(c) > _COEFF_ZERO_RTOL * scale)[0]
    if keep.size == 0:
        return c[:1] * 0.0
    return c[: keep[-1] + 1]


def _polyval(coeffs: np.ndarray, x):
    """Horner evaluation, constant-first coefficients."""
    x = np.asarray(x)
    acc = np.zeros_like(x, dtype=complex) + coeffs[-1]
    for k in range(len(coeffs) - 2, -1, -1):
        acc = acc * x + coeffs[k]
    return acc


def _polyder(coeffs: np.ndarray) -> np.ndarray:
    n = len(coeffs)
    if n <= 1:
        return np.zeros(1, dtype=complex)
    return coeffs[1:] * np.arange(1, n, dtype=float)


def _polymul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.convolve(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def _polyadd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = max(len(a), len(b))
    out = np.zeros(n, dtype=complex)
    out[: len(a)] += a
    out[: len(b)] += b
    return out


def aberth_roots(coeffs: Sequence[complex], tol: float = 1e-14, maxiter: int = 200) -> np.ndarray:
    """All complex roots of a polynomial by simultaneous (Aberth) iteration.

    Coefficients are constant-first.  Scale-normalized, so only the ratio
    of coefficients matters.  Falls back to the companion matrix if the
    iteration stalls, which for the degrees this package handles (< 100)
    costs little and keeps the contract unconditional.
    """
    c = _strip_high(np.asarray(coeffs, dtype=complex))
    deg = len(c) - 1
    if deg <= 0:
        return np.zeros(0, dtype=complex)
    c = c / np.max(np.abs(c))
    if deg == 1:
        return np.array([-c[0] / c[1]])
    # root moduli bound (Cauchy)
    radius = 1.0 + np.max(np.abs(c[:-1])) / abs(c[-1])
    k = np.arange(deg)
    z = radius * 0.6 * np.exp(2j * np.pi * (k / deg + 0.173))
    dc = _polyder(c)
    converged = False
    for _ in range(maxiter):
        p = _polyval(c, z)
        dp = _polyval(dc, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = np.where(dp != 0, p / np.where(dp != 0, dp, 1.0), 0.0)
            diff = z[:, None] - z[None, :]
            np.fill_diagonal(diff, np.inf)
            s = np.sum(1.0 / diff, axis=1)
            denom = 1.0 - newton * s
            step = np.where(denom != 0, newton / np.where(denom != 0, denom, 1.0), newton)
        bad = ~np.isfinite(step)
        if np.any(bad):
            step = np.where(bad, 0.01 * (1.0 + np.abs(z)) * np.exp(1j * 0.7), step)
        z = z - step
        if np.all(np.abs(step) <= tol * (1.0 + np.abs(z))):
            converged = True
            break
    if not converged:
        z = np.roots(c[::-1])
    # one Newton polish
    p = _polyval(c, z)
    dp = _polyval(dc, z)
    ok = np.abs(dp) > 1e-3 * np.abs(_polyval(np.abs(dc), np.abs(z))) * 1e-10 + 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(dp != 0, p / np.where(dp != 0, dp, 1.0), 0.0)
    small = np.abs(corr) < 1e-3 * (1.0 + np.abs(z))
    z = np.where(ok & small, z - corr, z)
    return z


# ---------------------------------------------------------------------------
# rational maps


class RationalMap:
    """A rational self-map of the sphere of degree >= 2.

    Stored as numerator / denominator coefficient arrays (constant-first),
    padded internally to equal length d + 1.  Reversed-coefficient copies
    implement evaluation in the w = 1/z chart:

        f(1/w) = num_rev(w) / den_rev(w).
    """

    def __init__(self, num: Sequence[complex], den: Sequence[complex]):
        num = _strip_high(np.asarray(num, dtype=complex))
        den = _strip_high(np.asarray(den, dtype=complex))
        if np.all(num == 0) or np.all(den == 0):
            raise DegenerateMapError("zero numerator or denominator")
        self.degree = max(len(num), len(den)) - 1
        if self.degree < 2:
            raise DegenerateMapError(f"degree {self.degree} < 2")
        d = self.degree
        self.num = np.zeros(d + 1, dtype=complex)
        self.den = np.zeros(d + 1, dtype=complex)
        self.num[: len(num)] = num
        self.den[: len(den)] = den
        self._check_no_common_root(num, den)
        # reversed (w-chart) coefficient arrays
        self.num_rev = self.num[::-1].copy()
        self.den_rev = self.den[::-1].copy()
        self.dnum = _polyder(self.num)
        self.dden = _polyder(self.den)
        self.dnum_rev = _polyder(self.num_rev)
        self.dden_rev = _polyder(self.den_rev)

    @staticmethod
    def _check_no_common_root(num: np.ndarray, den: np.ndarray) -> None:
        lo, hi = (num, den) if len(num) <= len(den) else (den, num)
        if len(lo) == 1:
            return  # nonzero constant shares no roots
        roots = aberth_roots(lo)
        vals = np.abs(_polyval(hi, roots))
        scale = np.max(np.abs(hi)) * np.maximum(1.0, np.abs(roots)) ** (len(hi) - 1)
        if np.any(vals <= 1e-9 * scale):
            raise DegenerateMapError("numerator and denominator share a root")

    # -- evaluation -------------------------------------------------------

    def eval_proj(self, a: complex, b: complex) -> tuple[complex, complex]:
        """Image of the projective point (a : b), normalized to scale ~1."""
        if b == 0 or (a != 0 and abs(a) > abs(b)):
            s = b / a
            n, d = _polyval(self.num_rev, s), _polyval(self.den_rev, s)
        else:
            t = a / b
            n, d = _polyval(self.num, t), _polyval(self.den, t)
        m = max(abs(n), abs(d))
        if m == 0.0:
            raise DegenerateMapError("projective evaluation degenerated")
        return n / m, d / m

    def eval(self, p: SpherePoint) -> SpherePoint:
        if p.is_inf:
            n, d = self.eval_proj(1.0, 0.0)
        else:
            n, d = self.eval_proj(p.z, 1.0)
        if abs(d) <= 1e-14 * abs(n):
            return SpherePoint.infinity()
        return SpherePoint.from_ratio(n, d)

    def eval_arrays(self, z, inf_mask):
        """Vectorized evaluation; returns (values, inf_mask).

        Values for points mapped to infinity are set to 0 under the mask.
        """
        z = np.asarray(z, dtype=complex)
        inf_mask = np.broadcast_to(np.asarray(inf_mask, dtype=bool), z.shape).copy()
        n = np.empty_like(z)
        d = np.empty_like(z)
        outer = (np.abs(z) > 1.0) | inf_mask
        inner = ~outer
        if np.any(inner):
            t = z[inner]
            n[inner] = _polyval(self.num, t)
            d[inner] = _polyval(self.den, t)
        if np.any(outer):
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(inf_mask[outer], 0.0, 1.0 / z[outer])
            n[outer] = _polyval(self.num_rev, s)
            d[outer] = _polyval(self.den_rev, s)
        mag = np.maximum(np.abs(n), np.abs(d))
        bad = mag == 0.0
        if np.any(bad):
            raise DegenerateMapError("projective evaluation degenerated")
        n = n / mag
        d = d / mag
        out_inf = np.abs(d) <= 1e-14 * np.abs(n)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.where(out_inf, 0.0, n / np.where(out_inf, 1.0, d))
        return vals, out_inf

    # -- derivatives ------------------------------------------------------

    def chart_derivative(self, p: SpherePoint, src: str, dst: str) -> complex:
        """Derivative of the map read in charts src -> dst at p.

        Chart 'z' is the identity coordinate, 'w' is 1/z.  Raises
        ChartError when the requested target chart has a pole at f(p).
        """
        if src == "z":
            if p.is_inf:
                raise ChartError("source chart z cannot hold infinity")
            x = p.z
            nc, dc, dnc, ddc = self.num, self.den, self.dnum, self.dden
        elif src == "w":
            x = 0j if p.is_inf else 1.0 / p.z
            nc, dc, dnc, ddc = self.num_rev, self.den_rev, self.dnum_rev, self.dden_rev
        else:
            raise InvalidArgumentError(f"unknown chart {src!r}")
        n = _polyval(nc, x)
        d = _polyval(dc, x)
        dn = _polyval(dnc, x)
        dd = _polyval(ddc, x)
        if dst == "z":
            if d == 0:
                raise ChartError("image at infinity cannot be read in chart z")
            return (dn * d - n * dd) / (d * d)
        if dst == "w":
            if n == 0:
                raise ChartError("image at zero cannot be read in chart w")
            return (dd * n - d * dn) / (n * n)
        raise InvalidArgumentError(f"unknown chart {dst!r}")

    def spherical_derivative(self, p: SpherePoint) -> float:
        """Norm of the derivative with respect to the chordal metric."""
        src = _chart_of(p)
        q = self.eval(p)
        dst = _chart_of(q)
        lam = self.chart_derivative(p, src, dst)
        xs = _chart_coord(p, src)
        xd = _chart_coord(q, dst)
        return abs(lam) * (1.0 + abs(xs) ** 2) / (1.0 + abs(xd) ** 2)

    # -- serialization ----------------------------------------------------

    def to_json_obj(self) -> dict:
        return {
            "num": [[c.real, c.imag] for c in self.num],
            "den": [[c.real, c.imag] for c in self.den],
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "RationalMap":
        num = [complex(re, im) for re, im in obj["num"]]
        den = [complex(re, im) for re, im in obj["den"]]
        return RationalMap(num, den)

    def __repr__(self) -> str:
        return f"RationalMap(deg={self.degree})"


def _chart_of(p: SpherePoint) -> str:
    if p.is_inf or abs(p.z) > 1.0:
        return "w"
    return "z"


def _chart_coord(p: SpherePoint, chart: str) -> complex:
    if chart == "z":
        if p.is_inf:
            raise ChartError("infinity has no z coordinate")
        return p.z
    return 0j if p.is_inf else 1.0 / p.z


def orbit(f: RationalMap, p: SpherePoint, n: int) -> list[SpherePoint]:
    """[p, f(p), ..., f^n(p)]."""
    if n < 0:
        raise InvalidArgumentError("orbit length must be >= 0")
    pts = [p]
    for _ in range(n):
        pts.append(f.eval(pts[-1]))
    return pts


def multiplier(f: RationalMap, p: SpherePoint, n: int) -> complex:
    """Derivative of f^n along the orbit of p, chain rule over adaptive charts.

    At a fixed point of f^n the result is chart-independent.  The start and
    end charts are forced equal so the value is a true multiplier whenever
    the orbit closes up.
    """
    if n < 1:
        raise InvalidArgumentError("multiplier needs n >= 1")
    pts = orbit(f, p, n)
    charts = [_chart_of(q) for q in pts]
    charts[n] = charts[0]
    try:
        out = 1.0 + 0j
        for k in range(n):
            out *= f.chart_derivative(pts[k], charts[k], charts[k + 1])
        return out
    except ChartError:
        a, b = 0.9607689228305228 + 0j, 0.21 + 0.18j  # |a|^2 + |b|^2 = 1
        g = conjugate_by_rotation(f, a, b)
        q = _rotate_point(p, a, b)
        return multiplier(g, q, n)


# ---------------------------------------------------------------------------
# rotations (used for chart fallback and for conjugation-invariance tests)


def _rotate_point(p: SpherePoint, a: complex, b: complex) -> SpherePoint:
    """Apply the sphere rotation R(z) = (a z + b) / (-conj(b) z + conj(a))."""
    if p.is_inf:
        return SpherePoint.from_ratio(a, -np.conj(b))
    return SpherePoint.from_ratio(a * p.z + b, -np.conj(b) * p.z + np.conj(a))


def conjugate_by_rotation(f: RationalMap, a: complex, b: complex) -> RationalMap:
    """R o f o R^{-1} for the rotation R(z) = (a z + b)/(-conj(b) z + conj(a)).

    Requires |a|^2 + |b|^2 = 1 up to rounding; the inverse is then the
    adjoint rotation.  Coefficients come from homogeneous substitution.
    """
    d = f.degree
    # R^{-1}(z) = (conj(a) z - b) / (conj(b) z + a)
    p1 = np.array([-b, np.conj(a)], dtype=complex)  # conj(a) z - b
    q1 = np.array([a, np.conj(b)], dtype=complex)  # conj(b) z + a
    # f(R^{-1}(z)) = N(p1/q1) / D(p1/q1); expand homogeneously with q1^d
    pow_p = [np.array([1.0 + 0j])]
    pow_q = [np.array([1.0 + 0j])]
    for _ in range(d):
        pow_p.append(_polymul(pow_p[-1], p1))
        pow_q.append(_polymul(pow_q[-1], q1))
    num_h = np.zeros(d + 1, dtype=complex)
    den_h = np.zeros(d + 1, dtype=complex)
    for k in range(d + 1):
        term = _polymul(pow_p[k], pow_q[d - k])
        num_h = _polyadd(num_h, f.num[k] * term)
        den_h = _polyadd(den_h, f.den[k] * term)
    # R(P/Q) = (a P + b Q) / (-conj(b) P + conj(a) Q)
    new_num = _polyadd(a * num_h, b * den_h)
    new_den = _polyadd(-np.conj(b) * num_h, np.conj(a) * den_h)
    return RationalMap(new_num, new_den)


# ---------------------------------------------------------------------------
# preimages


def _cluster_roots(roots: np.ndarray, tol: float) -> list[tuple[complex, int]]:
    """Greedy chordal clustering; returns (center, multiplicity) pairs."""
    order = np.argsort(np.round(roots.real, 12) + 1e-6 * np.round(roots.imag, 12))
    remaining = list(roots[order])
    clusters: list[tuple[complex, int]] = []
    while remaining:
        seed = remaining.pop(0)
        members = [seed]
        keep = []
        for r in remaining:
            if chordal_dist(SpherePoint(seed), SpherePoint(r)) <= tol:
                members.append(r)
            else:
                keep.append(r)
        remaining = keep
        clusters.append((complex(np.mean(members)), len(members)))
    return clusters


def preimages(f: RationalMap, q: SpherePoint, polish: bool = True) -> list[SpherePoint]:
    """All d preimages of q, repeated with multiplicity, sorted.

    Roots of qd * num - qn * den; a degree drop means extra preimages at
    infinity.  Each finite root is validated by mapping it forward.
    """
    if q.is_inf:
        qn, qd = 1.0 + 0j, 0j
    else:
        qn, qd = q.z, 1.0 + 0j
    scale = max(abs(qn), abs(qd))
    qn, qd = qn / scale, qd / scale
    coeffs = qd * f.num - qn * f.den
    coeffs = _strip_high(coeffs)
    d = f.degree
    deg_a = len(coeffs) - 1 if np.any(coeffs != 0) else 0
    if np.all(coeffs == 0):
        raise DegenerateMapError("identically zero preimage polynomial")
    inf_mult = d - deg_a
    roots = aberth_roots(coeffs)
    if polish and roots.size:
        dc = _polyder(coeffs)
        for _ in range(2):
            pv = _polyval(coeffs, roots)
            dv = _polyval(dc, roots)
            with np.errstate(divide="ignore", invalid="ignore"):
                corr = np.where(dv != 0, pv / np.where(dv != 0, dv, 1.0), 0.0)
            ok = np.abs(corr) < 1e-2 * (1.0 + np.abs(roots))
            roots = np.where(ok, roots - corr, roots)
    out: list[SpherePoint] = []
    for center, mult in _cluster_roots(roots, _MULTIPLICITY_TOL):
        pt = SpherePoint(center)
        res = chordal_dist(f.eval(pt), q)
        if res > 1e-7:
            raise RootFindingError(f"preimage residual {res:.3e} at {center}")
        out.extend([pt] * mult)
    out.extend([SpherePoint.infinity()] * inf_mult)
    if len(out) != d:
        raise RootFindingError(
            f"found {len(out)} preimages, expected degree {d}"
        )
    return sort_points(out)


def preimage_fibers(f: RationalMap, z, inf_mask):
    """Batched preimages for many targets at once.

    Returns (points, point_inf) of shape (K, d): row k lists the d
    preimages of target k (with multiplicity, deterministic order).
    Degenerate rows (degree drop -> preimages at infinity) fall back to
    the scalar path.
    """
    z = np.asarray(z, dtype=complex)
    inf_mask = np.asarray(inf_mask, dtype=bool)
    k = z.shape[0]
    d = f.degree
    qn = np.where(inf_mask, 1.0 + 0j, z)
    qd = np.where(inf_mask, 0j, 1.0 + 0j)
    scale = np.maximum(np.abs(qn), np.abs(qd))
    qn, qd = qn / scale, qd / scale
    coeffs = qd[:, None] * f.num[None, :] - qn[:, None] * f.den[None, :]
    rowmax = np.max(np.abs(coeffs), axis=1)
    deficient = np.abs(coeffs[:, d]) <= _COEFF_ZERO_RTOL * rowmax

    pts = np.zeros((k, d), dtype=complex)
    pinf = np.zeros((k, d), dtype=bool)

    full = ~deficient
    if np.any(full):
        sub = coeffs[full]
        if d == 2:
            r = _quadratic_roots(sub[:, 0], sub[:, 1], sub[:, 2])
        else:
            r = _companion_roots(sub)
        r = _polish_rows(sub, r)
        order = np.lexsort((np.round(r.imag, 12), np.round(r.real, 12)), axis=-1)
        pts[full] = np.take_along_axis(r, order, axis=1)
    if np.any(deficient):
        for idx in np.nonzero(deficient)[0]:
            target = SpherePoint.infinity() if inf_mask[idx] else SpherePoint(z[idx])
            for j, p in enumerate(preimages(f, target)):
                pinf[idx, j] = p.is_inf
                pts[idx, j] = p.z
    return pts, pinf


def _quadratic_roots(c0, c1, c2):
    """Stable vectorized roots of c0 + c1 z + c2 z^2 (c2 != 0 rowwise)."""
    disc = c1 * c1 - 4.0 * c2 * c0
    sq = np.sqrt(disc)
    flip = np.real(np.conj(c1) * sq) < 0.0
    sq = np.where(flip, -sq, sq)
    qq = -0.5 * (c1 + sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(qq != 0, qq / c2, 0.0)
        r2 = np.where(qq != 0, c0 / np.where(qq != 0, qq, 1.0), 0.0)
    both_zero = (qq == 0)
    if np.any(both_zero):
        r1 = np.where(both_zero, -0.5 * c1 / c2 + np.sqrt(disc) / (2.0 * c2), r1)
        r2 = np.where(both_zero, -0.5 * c1 / c2 - np.sqrt(disc) / (2.0 * c2), r2)
    return np.stack([r1, r2], axis=1)


def _companion_roots(coeffs_rows: np.ndarray) -> np.ndarray:
    """Batched companion-matrix eigenvalues, constant-first rows."""
    k, n = coeffs_rows.shape
    d = n - 1
    lead = coeffs_rows[:, -1][:, None]
    monic = coeffs_rows / lead
    comp = np.zeros((k, d, d), dtype=complex)
    comp[:, 1:, :-1] = np.broadcast_to(np.eye(d - 1, dtype=complex), (k, d - 1, d - 1))
    comp[:, :, -1] = -monic[:, :-1]
    return np.linalg.eigvals(comp)


def _polish_rows(coeffs_rows: np.ndarray, roots: np.ndarray) -> np.ndarray:
    """Two Newton steps per root, rowwise polynomials."""
    k, n = coeffs_rows.shape
    dcoef = coeffs_rows[:, 1:] * np.arange(1, n, dtype=float)[None, :]
    for _ in range(2):
        pv = np.zeros_like(roots) + coeffs_rows[:, -1][:, None]
        for j in range(n - 2, -1, -1):
            pv = pv * roots + coeffs_rows[:, j][:, None]
        dv = np.zeros_like(roots) + dcoef[:, -1][:, None]
        for j in range(n - 3, -1, -1):
            dv = dv * roots + dcoef[:, j][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(dv != 0, pv / np.where(dv != 0, dv, 1.0), 0.0)
        ok = np.abs(corr) < 1e-2 * (1.0 + np.abs(roots))
        roots = np.where(ok, roots - corr, roots)
    return roots


# ---------------------------------------------------------------------------
# critical points


def critical_points(f: RationalMap) -> list[SpherePoint]:
    """Zeros of the spherical derivative, with multiplicity, sorted.

    Finite critical points are zeros of the Wronskian num' den - num den';
    the multiplicity at infinity fills the count up to 2 deg - 2.
    """
    w = _polyadd(_polymul(f.dnum, f.den), -_polymul(f.num, f.dden))
    w = _strip_high(w)
    if np.all(w == 0):
        raise DegenerateMapError("identically zero Wronskian")
    deg_w = len(w) - 1
    total = 2 * f.degree - 2
    roots = aberth_roots(w)
    out: list[SpherePoint] = []
    for center, mult in _cluster_roots(roots, _MULTIPLICITY_TOL):
        out.extend([SpherePoint(center)] * mult)
    out.extend([SpherePoint.infinity()] * (total - deg_w))
    return sort_points(out)


def critical_orbit_distance(f: RationalMap, p: SpherePoint, depth: int) -> float:
    """min over 0 <= k <= depth, critical c of chordal(f^k(c), p)."""
    best = math.inf
    for c in critical_points(f):
        for q in orbit(f, c, depth):
            best = min(best, chordal_dist(q, p))
    return best
