"""Equilibrium states and holomorphic-motion diagnostics for rational maps."""

from .sphere import SpherePoint, RationalMap, chordal_dist, orbit

__all__ = ["SpherePoint", "RationalMap", "chordal_dist", "orbit"]
