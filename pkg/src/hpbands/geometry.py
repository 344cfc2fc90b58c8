"""Two-material unit cells and the Fourier data of their inverse permittivity.

Lengths are absolute (same unit as the lattice constant ``a``); the design
parameters of the two preset models are conventionally quoted as multiples
of ``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .errors import AdmissibilityError, ConfigError

#: smallest admissible box half-extent or sphere radius, relative to ``a``
MIN_FEATURE = 1e-6
EPS_SILICON = 13.0

MODEL1_LITERATURE = (0.125, 0.125, 0.25, 0.25)
MODEL2_LITERATURE = (1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 11.0 / 30.0)


@dataclass(frozen=True)
class Shape:
    """Axis-aligned box or sphere, interpreted periodically in the cell."""

    kind: str
    center: tuple
    half_extents: tuple = None
    radius: float = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.kind == "box":
            if self.half_extents is None or len(self.half_extents) != 3:
                raise ConfigError("box needs three half-extents")
            object.__setattr__(self, "half_extents", tuple(float(h) for h in self.half_extents))
        elif self.kind == "sphere":
            if self.radius is None:
                raise ConfigError("sphere needs a radius")
            object.__setattr__(self, "radius", float(self.radius))
        else:
            raise ConfigError(f"unknown shape kind {self.kind!r}")

    @classmethod
    def box(cls, center, half_extents):
        return cls("box", tuple(center), half_extents=tuple(half_extents))

    @classmethod
    def sphere(cls, center, radius):
        return cls("sphere", tuple(center), radius=radius)

    @property
    def sizes(self):
        return self.half_extents if self.kind == "box" else (self.radius,)

    def volume(self):
        if self.kind == "box":
            return 8.0 * float(np.prod(self.half_extents))
        return 4.0 / 3.0 * math.pi * self.radius**3

    def contains(self, x, a):
        """Strict membership of points ``x`` (..., 3), minimum-image wrapped."""
        d = np.asarray(x, dtype=float) - np.asarray(self.center)
        d = (d + 0.5 * a) % a - 0.5 * a
        if self.kind == "box":
            return np.all(np.abs(d) < np.asarray(self.half_extents), axis=-1)
        return np.einsum("...i,...i->...", d, d) < self.radius**2

    def to_dict(self, a=1.0):
        out = {"kind": self.kind, "center": [c / a for c in self.center]}
        if self.kind == "box":
            out["half_extents"] = [h / a for h in self.half_extents]
        else:
            out["radius"] = self.radius / a
        return out

    @classmethod
    def from_dict(cls, d, a=1.0):
        kind = d.get("kind")
        center = [a * float(c) for c in d["center"]]
        if kind == "box":
            return cls.box(center, [a * float(h) for h in d["half_extents"]])
        if kind == "sphere":
            return cls.sphere(center, a * float(d["radius"]))
        raise ConfigError(f"unknown shape kind {kind!r}")


@dataclass(frozen=True)
class DesignParams:
    model: int
    theta: tuple
    a: float = 1.0

    def __post_init__(self):
        if self.model not in (1, 2):
            raise ConfigError(f"model must be 1 or 2, got {self.model}")
        theta = tuple(float(t) for t in self.theta)
        if len(theta) != 4:
            raise ConfigError("theta must have four entries")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def literature(cls, model, a=1.0):
        base = MODEL1_LITERATURE if model == 1 else MODEL2_LITERATURE
        return cls(model, tuple(a * t for t in base), a)

    @property
    def theta_over_a(self):
        return tuple(t / self.a for t in self.theta)


@dataclass(frozen=True)
class UnitCell:
    a: float
    eps_background: float
    eps_inclusion: float
    shapes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.a <= 0:
            raise ConfigError("lattice constant must be positive")
        if self.eps_background <= 0 or self.eps_inclusion <= 0:
            raise ConfigError("permittivities must be positive")

    def validate(self, n_points=100_000):
        """Raise AdmissibilityError on tiny, oversized or overlapping shapes."""
        a = self.a
        for s in self.shapes:
            if min(s.sizes) < MIN_FEATURE * a:
                raise AdmissibilityError(f"shape {s} is below the minimum feature size {MIN_FEATURE}*a")
            if max(s.sizes) > 0.5 * a * (1 + 1e-12):
                raise AdmissibilityError(f"shape {s} does not fit in one periodic cell")
        if len(self.shapes) > 1:
            pts = a * qmc.Halton(d=3, scramble=False).random(n_points)
            count = np.zeros(n_points, dtype=int)
            for s in self.shapes:
                count += s.contains(pts, a)
            if np.any(count > 1):
                bad = pts[np.argmax(count > 1)]
                raise AdmissibilityError(f"shapes overlap near x={bad.tolist()}")
        return self

    def filling_fraction(self):
        return sum(s.volume() for s in self.shapes) / self.a**3

    def inverse_eps(self, x):
        """1/eps at points ``x`` (..., 3)."""
        x = np.asarray(x, dtype=float)
        inside = np.zeros(x.shape[:-1], dtype=bool)
        for s in self.shapes:
            inside |= s.contains(x, self.a)
        return np.where(inside, 1.0 / self.eps_inclusion, 1.0 / self.eps_background)

    def eta_hat(self, G):
        """Fourier coefficients of 1/eps at reciprocal vectors ``G`` (..., 3)."""
        G = np.asarray(G, dtype=float)
        out = np.zeros(G.shape[:-1], dtype=complex)
        for s in self.shapes:
            out += chi_hat(s, G, self.a)
        out *= 1.0 / self.eps_inclusion - 1.0 / self.eps_background
        zero = np.all(G == 0.0, axis=-1)
        out[zero] += 1.0 / self.eps_background
        return out


def _sphere_form_factor(u):
    """3 (sin u - u cos u) / u^3, with its Taylor series near 0."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    small = u < 1e-2
    us = u[small]
    out[small] = 1.0 - us**2 / 10.0 + us**4 / 280.0
    ul = u[~small]
    out[~small] = 3.0 * (np.sin(ul) - ul * np.cos(ul)) / ul**3
    return out


def chi_hat(shape, G, a=1.0):
    """(1/a^3) times the integral of the indicator of ``shape`` against exp(-iG.x)."""
    G = np.asarray(G, dtype=float)
    phase = np.exp(-1j * (G @ np.asarray(shape.center)))
    if shape.kind == "box":
        h = np.asarray(shape.half_extents)
        # np.sinc is the normalized sin(pi x)/(pi x)
        factors = (2.0 * h / a) * np.sinc(G * h / np.pi)
        return np.prod(factors, axis=-1) * phase
    r = shape.radius
    u = np.linalg.norm(G, axis=-1) * r
    return (4.0 * math.pi * r**3 / (3.0 * a**3)) * _sphere_form_factor(u) * phase


def validate_admissible(params: DesignParams) -> bool:
    """Membership of ``params.theta`` in the model's admissible set."""
    t = np.asarray(params.theta_over_a)
    tol = 1e-12
    if not np.all(np.isfinite(t)) or np.any(t < -tol):
        return False
    if params.model == 1:
        return bool(t[0] <= 0.5 + tol and t[1] <= 0.5 + tol and t[2] <= 1 + tol and t[3] <= 1 + tol)
    if np.any(t > 0.5 + tol):
        return False
    for i in range(3):
        for j in range(3):
            if i != j and math.hypot(t[i], t[j]) + t[3] > math.sqrt(2.0) / 2.0 + tol:
                return False
    return True


def _require(params, model):
    if params.model != model:
        raise ConfigError(f"expected model {model} parameters, got model {params.model}")
    if not validate_admissible(params):
        raise AdmissibilityError(f"theta/a={params.theta_over_a} is outside the admissible set of model {model}")


def model1_shapes(theta: Sequence[float], a=1.0):
    """Four-layer woodpile preset with six boxes (layer thickness a/4).

    Layers 1 and 4 hold rods centred on the cell boundary, so each appears as
    two blocks of width theta1 (layer 1, along x) and theta2 (layer 4, along y).
    Layers 2 and 3 hold a single central rod of width theta3 (along y) and
    theta4 (along x).
    """
    t1, t2, t3, t4 = theta
    hz = a / 8.0
    return (
        Shape.box((a / 2, t1 / 2, a / 8), (a / 2, t1 / 2, hz)),
        Shape.box((a / 2, a - t1 / 2, a / 8), (a / 2, t1 / 2, hz)),
        Shape.box((a / 2, a / 2, 3 * a / 8), (t3 / 2, a / 2, hz)),
        Shape.box((a / 2, a / 2, 5 * a / 8), (a / 2, t4 / 2, hz)),
        Shape.box((t2 / 2, a / 2, 7 * a / 8), (t2 / 2, a / 2, hz)),
        Shape.box((a - t2 / 2, a / 2, 7 * a / 8), (t2 / 2, a / 2, hz)),
    )


def model2_shapes(theta: Sequence[float], a=1.0):
    """Central sphere of radius theta4 plus a rod frame along the cube edges.

    The frame is split into disjoint pieces: a corner block with half-extents
    (theta1, theta2, theta3) and three rods leaving it along x, y and z whose
    cross-section half-widths are the remaining two thetas.
    """
    t1, t2, t3, r = theta
    return (
        Shape.sphere((a / 2, a / 2, a / 2), r),
        Shape.box((0.0, 0.0, 0.0), (t1, t2, t3)),
        Shape.box((a / 2, 0.0, 0.0), (a / 2 - t1, t2, t3)),
        Shape.box((0.0, a / 2, 0.0), (t1, a / 2 - t2, t3)),
        Shape.box((0.0, 0.0, a / 2), (t1, t2, a / 2 - t3)),
    )


def model1_cell(params: DesignParams, shapes=None, eps_inclusion=EPS_SILICON, eps_background=1.0):
    _require(params, 1)
    shapes = model1_shapes(params.theta, params.a) if shapes is None else shapes
    return UnitCell(params.a, eps_background, eps_inclusion, shapes).validate()


def model2_cell(params: DesignParams, shapes=None, eps_inclusion=EPS_SILICON, eps_background=1.0):
    _require(params, 2)
    shapes = model2_shapes(params.theta, params.a) if shapes is None else shapes
    return UnitCell(params.a, eps_background, eps_inclusion, shapes).validate()


def build_cell(params: DesignParams, shapes=None, eps_inclusion=EPS_SILICON, eps_background=1.0):
    build = model1_cell if params.model == 1 else model2_cell
    return build(params, shapes=shapes, eps_inclusion=eps_inclusion, eps_background=eps_background)


def homogeneous_cell(a=1.0, eps=1.0):
    return UnitCell(a, eps, eps, ())
