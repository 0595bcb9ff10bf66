"""Generating curves of axisymmetric bodies and their panel meshes.

A curve is a map t -> (r(t), z(t)) on [t_a, t_b], traversed so that the
unit normal n = (z', -r') / |gamma'| points away from the body.  Open
curves start and end on the symmetry axis.  Panels carry p-point
Gauss-Legendre nodes in the parameter t; the factor ds/dt is kept with
the weights instead of reparametrising by arclength.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

AXIS_TOL = 1e-12


class GeometryError(ValueError):
    pass


@lru_cache(maxsize=None)
def gauss_legendre(p):
    x, w = np.polynomial.legendre.leggauss(p)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@dataclass(frozen=True)
class Frame:
    r: float
    z: float
    dr: float
    dz: float
    speed: float
    normal: np.ndarray
    tangent: np.ndarray


class GeneratingCurve:
    """Parametrised generating curve.

    ``func(t)`` returns ``(r, z, dr/dt, dz/dt)`` for an array ``t``.  Corners
    are interior parameter values where the tangent jumps.  Axis points
    where the surface is not smooth (a cone tip) are collected in
    ``tips``; both corners and tips attract dyadic refinement.
    """

    def __init__(self, func, t_a, t_b, corners=(), closed=False, kind="custom", params=None):
        if not t_b > t_a:
            raise GeometryError("parameter interval is empty")
        corners = tuple(float(c) for c in corners)
        if list(corners) != sorted(corners) or any(not (t_a < c < t_b) for c in corners):
            raise GeometryError("corners must be sorted and interior to the parameter interval")
        self.func = func
        self.t_a = float(t_a)
        self.t_b = float(t_b)
        self.corners = corners
        self.closed = bool(closed)
        self.kind = kind
        self.params = dict(params or {})
        if closed:
            self.axis_ends = (False, False)
        else:
            r_ends = self.eval(np.array([self.t_a, self.t_b]))[0]
            self.axis_ends = (bool(abs(r_ends[0]) < AXIS_TOL), bool(abs(r_ends[1]) < AXIS_TOL))
        self.tips = tuple(t for t, on in zip((self.t_a, self.t_b), self.axis_ends)
                          if on and not self._meets_axis_square(t))
        self._check_radius()

    def eval(self, t):
        t = np.asarray(t, dtype=float)
        r, z, dr, dz = self.func(t)
        shape = t.shape
        return tuple(np.broadcast_to(np.asarray(a, dtype=float), shape).copy() for a in (r, z, dr, dz))

    def _meets_axis_square(self, t):
        # the surface is smooth across the axis only if the curve meets it
        # at a right angle
        eps = 1e-9 * (self.t_b - self.t_a)
        tt = t + eps if t == self.t_a else t - eps
        _, _, dr, dz = self.eval(np.array([tt]))
        return abs(dz[0]) <= 1e-6 * np.hypot(dr[0], dz[0])

    def _check_radius(self):
        t = np.linspace(self.t_a, self.t_b, 2001)[1:-1]
        r = self.eval(t)[0]
        if np.any(r <= 0):
            raise GeometryError("curve leaves the half plane r > 0")

    def axis_angle(self, end):
        """Angle between the curve and the axis at an axis end (0 or 1)."""
        t = self.t_a if end == 0 else self.t_b
        eps = 1e-9 * (self.t_b - self.t_a)
        _, _, dr, dz = self.eval(np.array([t + eps if end == 0 else t - eps]))
        return float(np.arctan2(abs(dr[0]), abs(dz[0])))

    def refine_points(self):
        return tuple(sorted(set(self.corners) | set(self.tips)))

    def segments(self):
        edges = [self.t_a, *self.corners, self.t_b]
        return list(zip(edges[:-1], edges[1:]))

    def frame_at(self, t):
        t = float(t)
        if not (self.t_a <= t <= self.t_b):
            raise GeometryError("parameter outside the curve")
        if any(abs(t - c) < 1e-14 * (self.t_b - self.t_a) for c in self.corners):
            raise GeometryError("the frame is undefined at a corner")
        r, z, dr, dz = (float(a[0]) for a in self.eval(np.array([t])))
        speed = float(np.hypot(dr, dz))
        tangent = np.array([dr, dz]) / speed
        normal = np.array([dz, -dr]) / speed
        return Frame(r, z, dr, dz, speed, normal, tangent)

    def arclength(self, panels=64, p=32):
        x, w = gauss_legendre(p)
        total = 0.0
        for a, b in self.segments():
            edges = np.linspace(a, b, panels + 1)
            half = 0.5 * np.diff(edges)
            t = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * x
            _, _, dr, dz = self.eval(t)
            total += float(np.sum(half[:, None] * w * np.hypot(dr, dz)))
        return total


def _torus(center=2.0, a=1.0, b=0.5):
    if not (center > a > 0 and b > 0):
        raise GeometryError("torus needs center > a > 0 and b > 0")

    def func(t):
        return center + a * np.cos(t), b * np.sin(t), -a * np.sin(t), b * np.cos(t)
    return GeneratingCurve(func, 0.0, 2 * np.pi, closed=True, kind="torus",
                           params=dict(center=center, a=a, b=b))


def _starfish(radius=2.0, amplitude=0.5, lobes=5):
    if not (radius > abs(amplitude) and int(lobes) == lobes):
        raise GeometryError("starfish needs radius > |amplitude| and an integer lobe count")

    def func(t):
        f = radius + amplitude * np.cos(lobes * np.pi * (t - 1))
        df = -amplitude * lobes * np.pi * np.sin(lobes * np.pi * (t - 1))
        c, s = np.cos(np.pi * (t - 0.5)), np.sin(np.pi * (t - 0.5))
        return f * c, f * s, df * c - np.pi * f * s, df * s + np.pi * f * c
    return GeneratingCurve(func, 0.0, 1.0, kind="starfish",
                           params=dict(radius=radius, amplitude=amplitude, lobes=lobes))


def _droplet():
    def func(t):
        s, ds = np.sin(np.pi * t), np.pi * np.cos(np.pi * t)
        a = 0.5 * np.pi * (t - 1.5)
        c, sn = np.cos(a), np.sin(a)
        return (s * c, s * sn + 0.5,
                ds * c - 0.5 * np.pi * s * sn,
                ds * sn + 0.5 * np.pi * s * c)
    return GeneratingCurve(func, 0.5, 1.0, kind="droplet")


def _polygon(vertices=((0.0, -1.0), (1.0, -1.0), (1.0, 1.0), (0.0, 1.0))):
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 2:
        raise GeometryError("vertices must be a list of (r, z) pairs")
    if np.any(v[:, 0] < 0):
        raise GeometryError("vertices must have r >= 0")
    seg = np.diff(v, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(lengths <= 0):
        raise GeometryError("repeated vertex")
    closed_loop = np.vstack([v, v[:1]])
    area = 0.5 * np.sum(closed_loop[:-1, 0] * closed_loop[1:, 1] - closed_loop[1:, 0] * closed_loop[:-1, 1])
    if area <= 0:
        raise GeometryError("vertices must run counterclockwise in the (r, z) plane")
    knots = np.concatenate([[0.0], np.cumsum(lengths)])
    unit = seg / lengths[:, None]

    def func(t):
        t = np.asarray(t, dtype=float)
        i = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(seg) - 1)
        u = t - knots[i]
        return (v[i, 0] + u * unit[i, 0], v[i, 1] + u * unit[i, 1], unit[i, 0], unit[i, 1])
    return GeneratingCurve(func, 0.0, float(knots[-1]), corners=tuple(knots[1:-1]), kind="cylinder",
                           params=dict(vertices=[list(map(float, p)) for p in v]))


def make_curve(kind, **params):
    """Build one of the named curves, or a ``custom`` one.

    custom takes ``r, z, dr, dz`` callables of t, ``t_a, t_b`` and optional
    ``corners`` and ``closed``.
    """
    if kind == "torus":
        return _torus(**params)
    if kind == "starfish":
        return _starfish(**params)
    if kind == "droplet":
        if params:
            raise GeometryError("droplet takes no parameters")
        return _droplet()
    if kind == "cylinder":
        return _polygon(**params)
    if kind == "custom":
        try:
            r, z, dr, dz = params["r"], params["z"], params["dr"], params["dz"]
            t_a, t_b = params["t_a"], params["t_b"]
        except KeyError as exc:
            raise GeometryError(f"custom curve is missing {exc.args[0]!r}") from None

        def func(t):
            return r(t), z(t), dr(t), dz(t)
        return GeneratingCurve(func, t_a, t_b, corners=params.get("corners", ()),
                               closed=params.get("closed", False), kind="custom")
    raise GeometryError(f"unknown curve kind {kind!r}")


@dataclass
class Panel:
    t0: float
    t1: float
    level: int = 0
    # parameter of the nearby corner or tip when the panel touches one
    touches: tuple = ()


@dataclass
class Mesh:
    curve: GeneratingCurve
    p: int
    panels: list
    t: np.ndarray = field(init=False)
    r: np.ndarray = field(init=False)
    z: np.ndarray = field(init=False)
    dr: np.ndarray = field(init=False)
    dz: np.ndarray = field(init=False)
    speed: np.ndarray = field(init=False)
    w: np.ndarray = field(init=False)

    def __post_init__(self):
        x, w = gauss_legendre(self.p)
        t0 = np.array([pn.t0 for pn in self.panels])
        t1 = np.array([pn.t1 for pn in self.panels])
        half = 0.5 * (t1 - t0)
        self.t = ((t0 + t1)[:, None] * 0.5 + half[:, None] * x[None, :]).ravel()
        self.r, self.z, self.dr, self.dz = self.curve.eval(self.t)
        self.speed = np.hypot(self.dr, self.dz)
        self.w = (half[:, None] * w[None, :]).ravel() * self.speed
        if np.any(self.r <= 0):
            raise GeometryError("a node lies on the axis")

    @property
    def n_panels(self):
        return len(self.panels)

    @property
    def n_points(self):
        return self.n_panels * self.p

    @property
    def panel_half(self):
        return np.array([0.5 * (pn.t1 - pn.t0) for pn in self.panels])

    @property
    def normal(self):
        return np.stack([self.dz, -self.dr]) / self.speed

    @property
    def tangent(self):
        return np.stack([self.dr, self.dz]) / self.speed

    def neighbors(self, i):
        """Indices of the panels sharing an endpoint with panel i."""
        n = self.n_panels
        out = []
        if i > 0:
            out.append(i - 1)
        elif self.curve.closed and n > 1:
            out.append(n - 1)
        if i < n - 1:
            out.append(i + 1)
        elif self.curve.closed and n > 1:
            out.append(0)
        return sorted(set(out) - {i})

    def panel_slice(self, i):
        return slice(i * self.p, (i + 1) * self.p)


def _split_counts(lengths, n):
    lengths = np.asarray(lengths, dtype=float)
    if n < len(lengths):
        raise GeometryError("need at least one base panel per smooth segment")
    raw = n * lengths / lengths.sum()
    counts = np.maximum(1, np.floor(raw).astype(int))
    while counts.sum() < n:
        counts[np.argmax(raw - counts)] += 1
    while counts.sum() > n:
        i = np.argmax(np.where(counts > 1, counts - raw, -np.inf))
        counts[i] -= 1
    return counts


def refine_depth(base_length, min_length):
    """Halvings needed to bring a panel of ``base_length`` down to ``min_length``."""
    return max(0, int(np.ceil(np.log2(base_length / min_length) - 1e-12)))


def build_mesh(curve, n_base_panels, p=16, refine=0, min_panel=None):
    """Uniform panels per smooth segment, then dyadic grading toward corners and tips.

    ``refine`` is the number of halvings applied to each panel touching a
    corner or tip; with ``min_panel`` the depth is instead chosen so that
    the smallest panel is no longer than ``min_panel`` in parameter length.
    """
    if p < 2:
        raise GeometryError("need at least two nodes per panel")
    if refine < 0:
        raise GeometryError("refinement depth must be nonnegative")
    segs = curve.segments()
    counts = _split_counts([b - a for a, b in segs], int(n_base_panels))
    spots = curve.refine_points()
    panels = []
    for (a, b), n in zip(segs, counts):
        edges = np.linspace(a, b, n + 1)
        edges[0], edges[-1] = a, b
        for t0, t1 in zip(edges[:-1], edges[1:]):
            panels.extend(_graded(t0, t1, spots, refine, min_panel))
    return Mesh(curve, p, panels)


def _graded(t0, t1, spots, refine, min_panel):
    hit0 = any(abs(t0 - s) <= 1e-14 * max(1.0, abs(s)) for s in spots)
    hit1 = any(abs(t1 - s) <= 1e-14 * max(1.0, abs(s)) for s in spots)
    if not (hit0 or hit1):
        return [Panel(t0, t1)]
    depth = refine if min_panel is None else refine_depth(t1 - t0, min_panel)
    if hit0 and hit1:
        mid = 0.5 * (t0 + t1)
        return _graded(t0, mid, (t0,), depth, None) + _graded(mid, t1, (t1,), depth, None)
    out = []
    lo, hi = t0, t1
    for level in range(1, depth + 1):
        mid = 0.5 * (lo + hi)
        if hit1:
            out.append(Panel(lo, mid, level))
            lo = mid
        else:
            out.insert(0, Panel(mid, hi, level))
            hi = mid
    out.insert(len(out) if hit1 else 0, Panel(lo, hi, depth, (t1,) if hit1 else (t0,)))
    return out
