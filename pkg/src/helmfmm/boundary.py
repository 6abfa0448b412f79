"""Parametric boundary curves and their equidistant discretization."""

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class BoundaryError(ValueError):
    pass


@dataclass(frozen=True)
class ParametricCurve:
    """A closed curve t -> (x1(t), x2(t)) on [0, 2 pi) with its derivative.

    Both callables take an array of t and return an array of shape (len(t), 2).
    """

    position: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    name: str = "curve"


@dataclass(frozen=True)
class BoundaryDisc:
    """Knots y_j at t_j = j pi / N (j = 1..2N) with weights, normals and density."""

    knots: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    density: np.ndarray
    t: np.ndarray
    name: str = "curve"

    @property
    def count(self):
        return self.knots.shape[0]

    @property
    def N(self):
        return self.count // 2

    @property
    def strengths(self):
        """phi(y_j) s(y_j), the per-knot source strength."""
        return self.density * self.weights


def kite():
    """The kite (cos t + 0.65 cos 2t - 0.65, 1.5 sin t)."""

    def pos(t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.cos(t) + 0.65 * np.cos(2 * t) - 0.65, 1.5 * np.sin(t)], axis=-1)

    def der(t):
        t = np.asarray(t, dtype=float)
        return np.stack([-np.sin(t) - 1.3 * np.sin(2 * t), 1.5 * np.cos(t)], axis=-1)

    return ParametricCurve(pos, der, "kite")


def circle(radius=1.0, center=(0.0, 0.0)):
    if not radius > 0:
        raise BoundaryError("circle radius must be positive")
    cx, cy = center

    def pos(t):
        t = np.asarray(t, dtype=float)
        return np.stack([cx + radius * np.cos(t), cy + radius * np.sin(t)], axis=-1)

    def der(t):
        t = np.asarray(t, dtype=float)
        return np.stack([-radius * np.sin(t), radius * np.cos(t)], axis=-1)

    return ParametricCurve(pos, der, f"circle:{radius:g}")


def tabulated_curve(path):
    """Curve from a CSV with header t,x1,x2,dx1,dx2.

    Values are interpolated periodically (linear in t); for exact knots,
    tabulate at t_j = j pi / N and discretize with the same N.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise BoundaryError(f"{path}: no rows")
    try:
        data = np.array([[float(r[k]) for k in ("t", "x1", "x2", "dx1", "dx2")] for r in rows])
    except KeyError as exc:
        raise BoundaryError(f"{path}: missing column {exc}") from None
    order = np.argsort(data[:, 0])
    data = data[order]
    tt = data[:, 0]

    def interp(cols):
        def f(t):
            t = np.mod(np.asarray(t, dtype=float), 2 * math.pi)
            return np.stack([np.interp(t, tt, data[:, c], period=2 * math.pi) for c in cols], axis=-1)

        return f

    return ParametricCurve(interp((1, 2)), interp((3, 4)), f"table:{path}")


def parse_curve(spec):
    """'kite', 'circle:R' or a path to a CSV table."""
    if spec == "kite":
        return kite()
    if spec.startswith("circle"):
        _, _, r = spec.partition(":")
        try:
            return circle(float(r) if r else 1.0)
        except ValueError:
            raise BoundaryError(f"bad circle spec {spec!r}") from None
    return tabulated_curve(spec)


def _signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def discretize(curve, N, density=None):
    """Sample the curve at t_j = j pi / N, j = 1..2N.

    density is a function of t returning complex values (default 1).
    Normals are the rotated unit tangents, oriented outward by the sign of
    the enclosed polygon area.
    """
    if int(N) != N or N < 2:
        raise BoundaryError("N must be an integer >= 2")
    N = int(N)
    t = np.arange(1, 2 * N + 1) * (math.pi / N)
    knots = np.asarray(curve.position(t), dtype=float)
    der = np.asarray(curve.derivative(t), dtype=float)
    w = np.hypot(der[:, 0], der[:, 1])
    if np.any(w == 0) or not np.all(np.isfinite(w)):
        raise BoundaryError("curve has a zero or non-finite tangent at a knot")
    normals = np.stack([der[:, 1], -der[:, 0]], axis=-1) / w[:, None]
    if _signed_area(knots) < 0:
        normals = -normals
    if density is None:
        phi = np.ones(2 * N, dtype=complex)
    else:
        phi = np.broadcast_to(np.asarray(density(t), dtype=complex), (2 * N,)).copy()
    return BoundaryDisc(knots, w, normals, phi, t, getattr(curve, "name", "curve"))


def from_points(points, weights=None, normals=None, density=None, name="points"):
    """Wrap arbitrary points as a BoundaryDisc (useful for synthetic tests)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if normals is None:
        nv = np.tile([1.0, 0.0], (n, 1))
    else:
        nv = np.asarray(normals, dtype=float)
        nv = nv / np.hypot(nv[:, 0], nv[:, 1])[:, None]
    phi = np.ones(n, dtype=complex) if density is None else np.asarray(density, dtype=complex)
    t = np.arange(1, n + 1) * (2 * math.pi / max(n, 1))
    return BoundaryDisc(pts, w, nv, phi, t, name)


def sup_norm_a(disc):
    """A = max_j |phi(y_j) s(y_j)|."""
    if disc.count == 0:
        return 0.0
    return float(np.max(np.abs(disc.strengths)))
