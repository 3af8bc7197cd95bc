"""Procedural surface samplers standing in for scanned object datasets.

Each family samples points uniformly by surface area from a parametric
surface in a canonical (axis-aligned) pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import normalize_unit_sphere

KINDS = ("sphere", "cube", "torus", "cylinder", "cone")
MIN_POINTS = 32

# per-kind parameter ranges (dimensionless, before normalization)
PARAM_RANGES = {
    "sphere": {},
    "cube": {"ex": (0.4, 1.0), "ey": (0.4, 1.0), "ez": (0.4, 1.0)},
    "torus": {"major": (0.6, 1.0), "minor": (0.15, 0.45)},
    "cylinder": {"radius": (0.3, 1.0), "height": (0.5, 2.0)},
    "cone": {"radius": (0.3, 1.0), "height": (0.5, 2.0)},
}


@dataclass
class ShapeSpec:
    kind: str
    n_points: int
    seed: int
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.n_points < MIN_POINTS:
            raise ValueError(f"n_points must be >= {MIN_POINTS}, got {self.n_points}")
        for name, (lo, hi) in PARAM_RANGES[self.kind].items():
            if name not in self.params:
                raise ValueError(f"{self.kind} needs parameter {name!r}")
            if not lo <= self.params[name] <= hi:
                raise ValueError(f"{self.kind}.{name}={self.params[name]} outside [{lo}, {hi}]")


def random_spec(kind: str, n_points: int, seed: int, rng: np.random.Generator) -> ShapeSpec:
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES[kind].items()}
    return ShapeSpec(kind=kind, n_points=n_points, seed=seed, params=params)


def _sphere(n, rng, _p):
    # antithetic pairs (plus a zero-sum triangle for odd n) keep the centroid at the origin
    half = n // 2 if n % 2 == 0 else (n - 3) // 2
    v = rng.normal(size=(half, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    parts = [v, -v]
    if n % 2:
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        b = np.cross(a, rng.normal(size=3))
        b /= np.linalg.norm(b)
        c = np.cross(a, b)
        ang = 2 * np.pi * np.arange(3) / 3
        parts.append(np.outer(np.cos(ang), b) + np.outer(np.sin(ang), c))
    return np.concatenate(parts)


def _cube(n, rng, p):
    ext = np.array([p["ex"], p["ey"], p["ez"]])
    # face pairs normal to x, y, z with areas 4*ey*ez etc.
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * ext
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * ext[axis]
    return pts


def _torus(n, rng, p):
    big, small = p["major"], p["minor"]
    out = np.empty((0, 3))
    # rejection on the tube angle: area element is proportional to (R + r cos v)
    while out.shape[0] < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        w = rng.uniform(0, 1, size=2 * n)
        keep = w < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
    return out[:n]


def _cylinder(n, rng, p):
    r, h = p["radius"], p["height"]
    areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, size=n), np.where(part == 1, h / 2, -h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], 1)


def _cone(n, rng, p):
    r, h = p["radius"], p["height"]
    slant = np.hypot(r, h)
    areas = np.array([np.pi * r * slant, np.pi * r * r])
    part = rng.choice(2, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    # lateral surface: distance from apex ~ sqrt(U) for uniform area
    s = np.sqrt(rng.uniform(0, 1, size=n))
    rad = np.where(part == 0, r * s, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, h / 2 - h * s, -h / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], 1)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder, "cone": _cone}


def sample_surface(spec: ShapeSpec) -> np.ndarray:
    """Raw surface samples in the shape's own frame (not normalized)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return _SAMPLERS[spec.kind](spec.n_points, rng, spec.params)


def generate_shape(spec: ShapeSpec) -> np.ndarray:
    """``n_points`` area-uniform surface samples, normalized to the unit sphere."""
    return normalize_unit_sphere(sample_surface(spec))
