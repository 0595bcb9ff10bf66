"""Generalized Gaussian quadrature for log-singular panel integrals.

Rules live on [-1, 1] and integrate, to near machine precision, every
function P_j(y) and P_j(y) log|y - c| with j < degree and c drawn from a
finite set of singular points.  A rule is produced by discretising the
function family on a graded composite Gauss-Legendre grid, compressing it
to an orthonormal basis, picking an interpolatory rule by pivoted QR and
then removing nodes one at a time with damped Gauss-Newton corrections.

Four kinds of rule are used by the discretisation:

* self:     target is node n of the panel itself, c = x_n
* adjacent: target on a neighbouring panel of relative size 1/2, 1 or 2
* corner:   as adjacent, but the neighbour sits across a corner
* axis:     self rule for the panel touching the symmetry axis, which also
            sees the mirror singularity of the target across the axis
"""
import hashlib
import os
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.linalg import qr

from .geometry import gauss_legendre

DATA_FILE = Path(__file__).parent / "data" / "ggq_rules.txt"
NEIGHBOR_RATIOS = (0.5, 1.0, 2.0)
FORMAT_TAG = "revscat-ggq 1"


class QuadratureDataError(RuntimeError):
    pass


def legendre_with_derivative(y, degree):
    """Values and derivatives of P_0..P_{degree-1} at y, shape (degree, len(y))."""
    y = np.asarray(y, dtype=float)
    P = np.empty((degree, y.size))
    D = np.zeros((degree, y.size))
    P[0] = 1.0
    if degree > 1:
        P[1] = y
        D[1] = 1.0
    for j in range(1, degree - 1):
        P[j + 1] = ((2 * j + 1) * y * P[j] - j * P[j - 1]) / (j + 1)
        D[j + 1] = D[j - 1] + (2 * j + 1) * P[j]
    return P, D


class Family:
    """P_j(y) and P_j(y) log|y - c| for j < degree and c in ``points``."""

    def __init__(self, degree, points):
        self.degree = degree
        self.points = np.asarray(points, dtype=complex).ravel()

    @property
    def size(self):
        return self.degree * (1 + self.points.size)

    def values(self, y, deriv=False):
        y = np.asarray(y, dtype=float)
        P, D = legendre_with_derivative(y, self.degree)
        diff = y[None, :] - self.points[:, None]
        lg = np.log(np.abs(diff))
        F = np.concatenate([P[None], P[None] * lg[:, None, :]]).reshape(self.size, y.size)
        if not deriv:
            return F
        inv = (1.0 / diff).real
        dF = np.concatenate([D[None], D[None] * lg[:, None, :] + P[None] * inv[:, None, :]])
        return F, dF.reshape(self.size, y.size)


def graded_grid(attractors, q=30, depth=44, max_len=0.25):
    """Composite Gauss-Legendre grid on [-1, 1] graded toward ``attractors``.

    Each attractor is a point of [-1, 1]; intervals shrink geometrically
    toward it so that log singularities there, or close to it, are resolved.
    """
    cuts = {-1.0, 1.0}
    for a in attractors:
        a = float(min(max(a, -1.0), 1.0))
        cuts.add(a)
        for k in range(depth):
            d = 2.0 ** -k
            for b in (a - d, a + d):
                if -1.0 < b < 1.0:
                    cuts.add(b)
    edges = np.array(sorted(cuts))
    fine = [edges[0]]
    for a, b in zip(edges[:-1], edges[1:]):
        n = max(1, int(np.ceil((b - a) / max_len)))
        fine.extend(np.linspace(a, b, n + 1)[1:])
    edges = np.array(fine)
    edges = edges[np.concatenate([[True], np.diff(edges) > 0])]
    x, w = gauss_legendre(q)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


def _attractors(points):
    out = []
    for c in np.asarray(points, dtype=complex).ravel():
        out.append(min(max(c.real, -1.0), 1.0))
    # exact values: rounding would move a cut off the singularity by an ulp
    return sorted(set(out))


class _Compressed:
    """Orthonormal basis of the family on the fine grid."""

    def __init__(self, family, xs, ws, svd_tol):
        self.family = family
        F = family.values(xs)
        self.raw_moments = F @ ws
        sw = np.sqrt(ws)
        A = F * sw[None, :]
        scale = np.linalg.norm(A, axis=1)
        scale[scale == 0] = 1.0
        A /= scale[:, None]
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        r = int(np.sum(s > svd_tol * s[0]))
        # basis functions keep their singular values as weights, so badly
        # determined directions cannot amplify rounding error
        self.coef = U[:, :r].T / scale[None, :]
        self.basis = Vt[:r]
        self.moments = s[:r] * (self.basis @ sw)
        self.rank = r

    def phi(self, y, deriv=False):
        if deriv:
            F, dF = self.family.values(y, deriv=True)
            return self.coef @ F, self.coef @ dF
        return self.coef @ self.family.values(y)


def _initial_rule(comp, xs, ws):
    _, _, piv = qr(comp.basis, pivoting=True, mode="economic")
    sel = np.sort(piv[:comp.rank])
    x = xs[sel]
    w = np.linalg.lstsq(comp.phi(x), comp.moments, rcond=None)[0]
    return x, w


def _gauss_newton(comp, x, w, tol, forbidden, iters=40):
    """Truncated Gauss-Newton with step halving on the node/weight residual."""
    def resid(xx, ww):
        return comp.phi(xx) @ ww - comp.moments

    def ok(xx):
        return np.all(np.abs(xx) < 1.0) and all(np.min(np.abs(xx - f)) > 1e-15 for f in forbidden)

    R = resid(x, w)
    err = np.linalg.norm(R)
    n = x.size
    for _ in range(iters):
        if err < tol:
            break
        Phi, dPhi = comp.phi(x, deriv=True)
        J = np.hstack([Phi, dPhi * w[None, :]])
        D = np.linalg.norm(J, axis=0)
        D[D == 0] = 1.0
        U, s, Vt = np.linalg.svd(J / D, full_matrices=False)
        coef = U.T @ R
        best = None
        for cut in (1e-13, 1e-11, 1e-9, 1e-7, 1e-5):
            keep = s > cut * s[0]
            step = (Vt[keep].T @ (coef[keep] / s[keep])) / D
            t = 1.0
            for _ in range(6):
                xn, wn = x - t * step[n:], w - t * step[:n]
                if ok(xn):
                    en = np.linalg.norm(resid(xn, wn))
                    if np.isfinite(en) and en < err and (best is None or en < best[0]):
                        best = (en, xn, wn)
                    if np.isfinite(en) and en < err:
                        break
                t *= 0.5
        if best is None or best[0] > 0.999 * err:
            break
        err, x, w = best
    return x, w, err


def build_rule(family, attractors=None, target_nodes=None, tol=1e-14, svd_tol=1e-14,
               forbidden=(), max_tries=12, grid=None):
    """Compressed quadrature rule for ``family``.

    Returns ``(x, w)`` sorted by node; ``forbidden`` lists points the nodes
    must avoid (the log singularity of a self rule).
    """
    if grid is None:
        grid = graded_grid(_attractors(family.points) if attractors is None else attractors)
    xs, ws = grid
    comp = _Compressed(family, xs, ws, svd_tol)
    tol = tol * np.sqrt(comp.rank)
    x, w = _initial_rule(comp, xs, ws)
    x, w, err = _gauss_newton(comp, x, w, tol, forbidden)
    if err >= 100 * tol:
        raise QuadratureDataError(f"initial rule residual {err:.2e}")
    floor = target_nodes or (comp.rank + 1) // 2
    while err < tol and x.size > floor:
        Phi = comp.phi(x)
        sig = np.abs(w) * np.sqrt(np.sum(Phi ** 2, axis=0))
        for k in np.argsort(sig)[:max_tries]:
            keep = np.arange(x.size) != k
            xn, wn, e = _gauss_newton(comp, x[keep], w[keep], tol, forbidden)
            if e < tol:
                x, w = xn, wn
                break
        else:
            break
    order = np.argsort(x)
    return x[order], w[order]


# function families ---------------------------------------------------------

def self_points(p, n):
    return [gauss_legendre(p)[0][n]]


def neighbor_points(p, ratios=NEIGHBOR_RATIOS, turn=0.0):
    """Singular points of targets on both neighbours, seen from the source panel.

    ``turn`` is the angle by which the curve turns at the shared endpoint;
    zero for a smooth neighbour.
    """
    x = gauss_legendre(p)[0]
    rot = np.exp(1j * (np.pi - turn))
    out = []
    for rho in ratios:
        d = rho * (1.0 + x)
        out.extend(1.0 - d * rot)
        out.extend(-1.0 + d * rot)
    return out


def mirror_point(p, n, angle):
    """Mirror image of target n across the axis end at y = -1."""
    x = gauss_legendre(p)[0][n]
    return -1.0 + (1.0 + x) * np.exp(1j * angle)


def _self_rule(p, degree, n, mirror=None):
    xn = gauss_legendre(p)[0][n]
    pts = [xn] if mirror is None else [xn, mirror_point(p, n, mirror)]
    att = [xn, -1.0] if mirror is not None else [xn]
    fam = Family(degree, pts)
    return build_rule(fam, attractors=att, target_nodes=degree, forbidden=(xn,))


def _neighbor_rule(p, degree, turn=0.0):
    pts = neighbor_points(p, turn=0.0)
    if turn:
        pts = pts + neighbor_points(p, turn=turn)
    fam = Family(degree, pts)
    return build_rule(fam, attractors=[-1.0, 1.0])


# storage -------------------------------------------------------------------

class RuleSet:
    """All rules for one panel order."""

    def __init__(self, p, degree, rules):
        self.p = p
        self.degree = degree
        self.rules = rules

    def self_rule(self, n):
        return self.rules[("self", n)]

    def adjacent_rule(self):
        return self.rules[("adjacent", 0)]

    def corner_rule(self, turn):
        key = ("corner", _angle_key(turn))
        if key not in self.rules:
            self.rules[key] = _neighbor_rule(self.p, self.degree, turn)
        return self.rules[key]

    def axis_rule(self, n, angle, end=0):
        """Self rule for a panel whose ``end`` (0 left, 1 right) touches the axis."""
        if end == 1:
            x, w = self.axis_rule(self.p - 1 - n, angle, 0)
            return -x[::-1], w[::-1]
        key = ("axis", _angle_key(angle), n)
        if key not in self.rules:
            self.rules[key] = _self_rule(self.p, self.degree, n, mirror=angle)
        return self.rules[key]

    def dumps(self):
        lines = []
        for key in sorted(self.rules, key=lambda k: (k[0], k[1:])):
            x, w = self.rules[key]
            lines.append(" ".join(["rule", *map(str, key), str(len(x))]))
            lines.extend(f"{a!r} {b!r}" for a, b in zip(x.tolist(), w.tolist()))
        body = "\n".join(lines) + "\n"
        digest = hashlib.sha256(body.encode()).hexdigest()
        head = f"# {FORMAT_TAG}\n# p {self.p} degree {self.degree}\n# sha256 {digest}\n"
        return head + body

    @classmethod
    def loads(cls, text):
        head, body = [], []
        for line in text.splitlines(keepends=True):
            (head if line.startswith("#") and not body else body).append(line)
        meta = {}
        for line in head:
            parts = line[1:].split()
            if parts[:1] == ["p"]:
                meta["p"], meta["degree"] = int(parts[1]), int(parts[3])
            elif parts[:1] == ["sha256"]:
                meta["sha"] = parts[1]
            elif " ".join(parts) == FORMAT_TAG:
                meta["tag"] = True
        body = "".join(body)
        if not meta.get("tag") or "sha" not in meta or "p" not in meta:
            raise QuadratureDataError("quadrature file header is malformed")
        if hashlib.sha256(body.encode()).hexdigest() != meta["sha"]:
            raise QuadratureDataError("quadrature file checksum mismatch")
        rules = {}
        lines = body.splitlines()
        i = 0
        while i < len(lines):
            parts = lines[i].split()
            if parts[0] != "rule":
                raise QuadratureDataError(f"unexpected line {lines[i]!r}")
            kind, rest, n = parts[1], parts[2:-1], int(parts[-1])
            key = (kind, *[_parse_key(v) for v in rest])
            vals = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n]])
            rules[key] = (vals[:, 0].copy(), vals[:, 1].copy())
            i += 1 + n
        return cls(meta["p"], meta["degree"], rules)


def _angle_key(a):
    return round(float(a), 10)


def _parse_key(v):
    try:
        return int(v)
    except ValueError:
        return float(v)


def build_rule_set(p=16, degree=32, progress=None):
    rules = {}
    for n in range(p):
        rules[("self", n)] = _self_rule(p, degree, n)
        if progress:
            progress(f"self {n}: {len(rules[('self', n)][0])} nodes")
    rules[("adjacent", 0)] = _neighbor_rule(p, degree)
    if progress:
        progress(f"adjacent: {len(rules[('adjacent', 0)][0])} nodes")
    rs = RuleSet(p, degree, rules)
    rs.corner_rule(np.pi / 2)
    for angle in (np.pi, np.pi / 2):
        for n in range(p):
            rs.axis_rule(n, angle)
        if progress:
            progress(f"axis {angle:.4f} done")
    return rs


@lru_cache(maxsize=None)
def load_rules(p=16, degree=32, path=None):
    """Rules for order p; read from the packaged file, built if absent."""
    path = Path(path or os.environ.get("REVSCAT_GGQ_FILE", DATA_FILE))
    if path.exists():
        rs = RuleSet.loads(path.read_text())
        if rs.p == p and rs.degree == degree:
            return rs
    return build_rule_set(p, degree)


def check_exactness(x, w, family):
    """Largest relative moment error of the rule over ``family``."""
    xs, ws = graded_grid(_attractors(family.points) + [-1.0, 1.0])
    worst = 0.0
    # a few singular points at a time keeps the sample matrix small
    for i in range(0, max(family.points.size, 1), 4):
        part = Family(family.degree, family.points[i:i + 4])
        F = part.values(xs)
        ref = F @ ws
        got = part.values(x) @ w
        scale = np.sqrt(np.abs(F) ** 2 @ ws)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(scale, 1e-300))))
    return worst
