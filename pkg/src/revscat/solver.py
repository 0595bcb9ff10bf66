"""Incident fields, per-mode solves and post-processing of the currents."""
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sfft
from scipy.special import jv

from . import quadops as Q
from .geometry import Mesh, Panel, gauss_legendre
from .modalgreen import KERNEL_TOL, modal_kernels

DECOMP_TOL = 1e-12
MAX_AZIMUTHAL = 1 << 14
LOOP_POINTS = 64
MODE_MEMORY = 1.5e9


class BandwidthFailure(RuntimeError):
    pass


class ProbeError(ValueError):
    pass


class SolveFailure(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        super().__init__("; ".join(f"mode {m}: {e}" for m, e in failures))


# incident fields ---------------------------------------------------------------

def direction(theta, phi):
    """Unit vector with azimuth theta and polar angle phi."""
    return np.array([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


@dataclass
class PlaneWave:
    d: np.ndarray
    p: np.ndarray
    k0: float
    omega_mu0: float = None

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        self.d = self.d / np.linalg.norm(self.d)
        q = np.cross(self.d, np.asarray(self.p, dtype=float))
        nq = np.linalg.norm(q)
        if nq < 1e-12:
            raise ValueError("polarization is parallel to the propagation direction")
        self.h = q / nq
        self.e = np.cross(self.h, self.d)
        if self.omega_mu0 is None:
            self.omega_mu0 = self.k0

    @classmethod
    def for_media(cls, media, d, p):
        return cls(d, p, media.k0, media.omega * complex(media.mu0))

    @classmethod
    def from_angles(cls, media, theta1=np.pi / 3, phi1=2 * np.pi / 3, theta2=np.pi / 2, phi2=np.pi / 3):
        """Propagation direction and polarization given as (azimuth, polar) angle pairs."""
        return cls.for_media(media, direction(theta1, phi1), direction(theta2, phi2))

    def fields(self, x):
        x = np.atleast_2d(x)
        ph = np.exp(1j * self.k0 * (x @ self.d))[:, None]
        return ph * self.e, ph * self.h * (self.k0 / self.omega_mu0)


@dataclass
class CurrentLoop:
    """Field of a horizontal circular current loop, E = curl A, H = curl curl A / (i w mu)."""
    center: tuple = (0.4, 0.5, 5.0)
    radius: float = 0.42
    k: complex = 1.0
    omega: float = 1.0
    mu: complex = 1.0
    n: int = LOOP_POINTS

    def _segments(self):
        a = 2 * np.pi * np.arange(self.n) / self.n
        c = np.asarray(self.center, dtype=float)
        y = c + self.radius * np.stack([np.cos(a), np.sin(a), np.zeros_like(a)], axis=1)
        dl = (2 * np.pi * self.radius / self.n) * np.stack([-np.sin(a), np.cos(a), np.zeros_like(a)], axis=1)
        return y, dl

    def fields(self, x, chunk=4096):
        x = np.atleast_2d(x)
        if len(x) > chunk:
            parts = [self.fields(x[i:i + chunk], chunk) for i in range(0, len(x), chunk)]
            return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])
        y, dl = self._segments()
        R = x[:, None, :] - y[None, :, :]
        d = np.linalg.norm(R, axis=2)
        u = R / d[..., None]
        k = self.k
        G = np.exp(1j * k * d) / (4 * np.pi * d)
        f = G * (1j * k - 1 / d)
        A = np.einsum("pq,qi->pi", G, dl)
        E = np.einsum("pq,pqi->pi", f, np.cross(u, dl[None, :, :]))
        ud = np.einsum("pqi,qi->pq", u, dl)
        a = f / d
        b = G * ((1j * k - 1 / d) ** 2 + 1 / d ** 2) - a
        grad_div = np.einsum("pq,qi->pi", a, dl) + np.einsum("pq,pqi->pi", b * ud, u)
        H = (k ** 2 * A + grad_div) / (1j * self.omega * self.mu)
        return E, H


# modal decomposition -------------------------------------------------------

def _tangential_traces(field, mesh, n_theta):
    """(n x E)_t, (n x E)_theta, (n x H)_t, (n x H)_theta on rings, shape (4, N, n_theta)."""
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    c, s = np.cos(th), np.sin(th)
    r, z = mesh.r[:, None], mesh.z[:, None]
    pts = np.stack([np.broadcast_to(r * c, (mesh.n_points, n_theta)),
                    np.broadcast_to(r * s, (mesh.n_points, n_theta)),
                    np.broadcast_to(z, (mesh.n_points, n_theta))], axis=-1).reshape(-1, 3)
    E, H = field.fields(pts)
    tr = (mesh.dr / mesh.speed)[:, None]
    tz = (mesh.dz / mesh.speed)[:, None]
    out = []
    for F in (E, H):
        F = F.reshape(mesh.n_points, n_theta, 3)
        fr = F[..., 0] * c + F[..., 1] * s
        ft = -F[..., 0] * s + F[..., 1] * c
        out.append(ft)
        out.append(-(tr * fr + tz * F[..., 2]))
    return np.array(out)


def _pow2_at_least(n):
    return 1 << int(np.ceil(np.log2(max(n, 2))))


def decompose_incident(field, mesh, tol=DECOMP_TOL, n_guess=None):
    """Azimuthal Fourier coefficients of the tangential traces.

    Returns (coef, N_f) with coef of shape (2 N_f + 1, 4, N), mode m stored
    at index m + N_f.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if n_guess is None:
        k = abs(getattr(field, "k0", getattr(field, "k", 1.0)))
        n_guess = 2 * int(np.ceil(k * mesh.r.max())) + 16
    n_theta = _pow2_at_least(4 * (n_guess + 1))
    while n_theta <= MAX_AZIMUTHAL:
        tr = _tangential_traces(field, mesh, n_theta)
        c = sfft.fft(tr, axis=-1) / n_theta
        mags = np.abs(c).max(axis=(0, 1))
        top = mags.max()
        half = n_theta // 2
        # magnitude of mode |m| (folding m and -m)
        fold = np.maximum(mags[:half + 1], np.concatenate([[mags[0]], mags[:half:-1], [mags[half]]]))
        big = np.nonzero(fold > tol * top)[0] if top > 0 else np.array([0])
        n_f = int(big.max()) if big.size else 0
        if n_f < n_theta // 4:
            modes = np.arange(-n_f, n_f + 1)
            coef = np.moveaxis(c[..., modes % n_theta], -1, 0)
            return coef, n_f
        n_theta *= 2
    raise BandwidthFailure(f"incident field not resolved with {MAX_AZIMUTHAL} azimuthal samples")


def modal_rhs(coef, kind, media):
    co = Q.formulation_coefficients(kind, media)
    out = np.empty_like(coef)
    out[:, :2] = co["rhs_E"] * coef[:, :2]
    out[:, 2:] = co["rhs_H"] * coef[:, 2:]
    return out


# solution ------------------------------------------------------------------

@dataclass
class Timings:
    kernel: float = 0.0
    matgen: float = 0.0
    solve: float = 0.0
    add: float = 0.0


@dataclass
class ScatterSolution:
    """Modal currents; currents[m + n_f] has rows (J1, J2, M1, M2) at the nodes."""
    mesh: object
    media: Q.Media
    kind: str
    n_f: int
    currents: np.ndarray
    timings: Timings = field(default_factory=Timings)
    conditions: dict = field(default_factory=dict)

    @property
    def modes(self):
        return np.arange(-self.n_f, self.n_f + 1)

    def mode(self, m):
        return self.currents[m + self.n_f]

    def decay_ratio(self):
        """Size of the outermost mode relative to the largest."""
        mx = np.abs(self.currents).max(axis=(1, 2))
        return float(max(mx[0], mx[-1]) / mx.max()) if mx.max() > 0 else 0.0


def _group_size(n_points, budget):
    per = 16.0 * (4 * n_points) ** 2
    return max(1, int(budget // per))


def solve_scattering(mesh, media, incident, kind="indirect", tol=DECOMP_TOL, kernel_tol=KERNEL_TOL,
                     plan=None, mode_memory=MODE_MEMORY, extra_rhs=True, keep_conditions=True):
    """Decompose the incident field, then assemble, factorize and solve every mode."""
    coef, n_f = decompose_incident(incident, mesh, tol)
    rhs = modal_rhs(coef, kind, media)
    N = mesh.n_points
    plan = plan or Q.build_plan(mesh)
    tim = Timings()
    stats = {}
    currents = np.zeros((2 * n_f + 1, 4, N), dtype=complex)
    conds, failures = {}, []
    group = _group_size(N, mode_memory)
    ms = list(range(n_f + 1))
    rng = np.random.default_rng(0)
    for g0 in range(0, len(ms), group):
        chunk = ms[g0:g0 + group]
        t0 = time.perf_counter()
        kstart = stats.get("kernel", 0.0)
        systems = Q.assemble_mode_matrices(kind, mesh, media, chunk, plan=plan, tol=kernel_tol, stats=stats)
        tim.kernel += stats.get("kernel", 0.0) - kstart
        tim.matgen += time.perf_counter() - t0 - (stats.get("kernel", 0.0) - kstart)
        for sy in systems:
            m = sy.m
            t0 = time.perf_counter()
            try:
                Q.factorize(sy)
            except np.linalg.LinAlgError as exc:
                failures.append((m, str(exc)))
                continue
            currents[n_f + m] = Q.solve(sy, rhs[n_f + m].reshape(-1)).reshape(4, N)
            if m:
                currents[n_f - m] = Q.solve(sy, rhs[n_f - m].reshape(-1), mirror=True).reshape(4, N)
            tim.solve += time.perf_counter() - t0
            if extra_rhs:
                b = rng.standard_normal(4 * N) + 1j * rng.standard_normal(4 * N)
                t0 = time.perf_counter()
                Q.solve(sy, b)
                tim.add += time.perf_counter() - t0
            if keep_conditions:
                conds[m] = Q.condition_number(sy)
        del systems
    if failures:
        raise SolveFailure(failures)
    return ScatterSolution(mesh, media, kind, n_f, currents, tim, conds)


# resampling ------------------------------------------------------------------

def _locate(mesh, t):
    """Panel index and local coordinate in [-1, 1] of each parameter value."""
    t0 = np.array([pn.t0 for pn in mesh.panels])
    t1 = np.array([pn.t1 for pn in mesh.panels])
    i = np.clip(np.searchsorted(t1, t, side="left"), 0, mesh.n_panels - 1)
    return i, np.clip((2 * t - t0[i] - t1[i]) / (t1[i] - t0[i]), -1.0, 1.0)


def sample_currents(sol, t):
    """Modal currents (modes, 4, len(t)) interpolated from the panel polynomials."""
    mesh, p = sol.mesh, sol.mesh.p
    idx, x = _locate(mesh, np.asarray(t, dtype=float))
    out = np.empty((sol.currents.shape[0], 4, len(x)), dtype=complex)
    for i in np.unique(idx):
        sel = idx == i
        B = Q.interpolation_matrix(x[sel], p)
        out[:, :, sel] = sol.currents[:, :, i * p:(i + 1) * p] @ B.T
    return out


def subdivide(sol, levels):
    """The same currents carried on a mesh whose panels are split into 2**levels pieces.

    Used to evaluate fields closer to the surface than the solve mesh allows.
    """
    if levels == 0:
        return sol
    pieces = 1 << levels
    mesh, p = sol.mesh, sol.mesh.p
    panels = []
    for pn in mesh.panels:
        e = np.linspace(pn.t0, pn.t1, pieces + 1)
        panels.extend(Panel(a, b, pn.level, pn.touches) for a, b in zip(e[:-1], e[1:]))
    fine = Mesh(mesh.curve, p, panels)
    x = gauss_legendre(p)[0]
    y = (-1 + (np.arange(pieces)[:, None] + 0.5 * (x[None, :] + 1)) * 2 / pieces).ravel()
    B = Q.interpolation_matrix(y, p)
    cur = sol.currents.reshape(*sol.currents.shape[:2], mesh.n_panels, p) @ B.T
    return replace(sol, mesh=fine, currents=cur.reshape(*sol.currents.shape[:2], -1))


# surface divergence and potentials -------------------------------------------

def surface_divergence(mesh, J1, J2, m):
    """(1/r) d(r J1)/ds + (i m / r) J2 at the nodes, by per-panel spectral differentiation."""
    p = mesh.p
    D = Q.differentiation_matrix(p)
    rJ = (mesh.r * J1).reshape(mesh.n_panels, p)
    d = (rJ @ D.T).reshape(-1) / (mesh.panel_half.repeat(p) * mesh.speed)
    return (d + 1j * m * J2) / mesh.r


def _min_panel_clearance(mesh, r, z):
    """Distance to each panel divided by that panel's length, minimum over panels."""
    p = mesh.p
    x, _ = gauss_legendre(4 * p)
    worst = np.full(r.shape, np.inf)
    for i, pn in enumerate(mesh.panels):
        t = 0.5 * (pn.t0 + pn.t1) + 0.5 * (pn.t1 - pn.t0) * np.concatenate([[-1.0], x, [1.0]])
        cr, cz, _, _ = mesh.curve.eval(t)
        length = mesh.w[i * p:(i + 1) * p].sum()
        dist = np.hypot(r[:, None] - cr[None], z[:, None] - cz[None]).min(axis=1)
        worst = np.minimum(worst, dist / length)
    return worst


def _check_points(mesh, points):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.hypot(pts[:, 0], pts[:, 1])
    if np.any(r < 1e-10):
        raise ProbeError("evaluation points on the symmetry axis are not supported")
    if np.any(_min_panel_clearance(mesh, r, pts[:, 2]) < 1.0):
        raise ProbeError("evaluation point closer to the surface than one panel length")
    return pts, r


def _layer_potentials(sol, pts, r, k, which):
    """Cartesian (curl S J, curl curl S J) style fields for one density.

    which: 0 for J, 1 for M.  Returns (curl, curlcurl) arrays of shape (n, 3).
    """
    mesh = sol.mesh
    npt, N = len(pts), mesh.n_points
    M = sol.n_f
    rt = np.repeat(r, N)
    zt = np.repeat(pts[:, 2], N)
    rs = np.tile(mesh.r, npt)
    zs = np.tile(mesh.z, npt)
    K = modal_kernels(rt, zt, rs, zs, k, k, M)
    trs = np.tile(mesh.dr / mesh.speed, npt)
    tzs = np.tile(mesh.dz / mesh.speed, npt)
    ps = Q.PairSet(rt, zt, None, None, rs, zs, trs, tzs)
    wq = np.tile(mesh.w, npt)
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    curl = np.zeros((npt, 3), dtype=complex)
    cc = np.zeros((npt, 3), dtype=complex)
    for m in sol.modes:
        dens = sol.mode(m)[2 * which:2 * which + 2]
        J1 = np.tile(dens[0], npt) * wq
        J2 = np.tile(dens[1], npt) * wq
        div = np.tile(surface_divergence(mesh, dens[0], dens[1], m), npt) * wq
        vals = []
        for row in (0, 2, 3):
            tri = Q._trio(K[row], m)
            c1, c2 = Q._c_columns(ps, *tri)
            vec = [(c1[q] * J1 + c2[q] * J2).reshape(npt, N).sum(axis=1) for q in range(3)]
            sig = (ps.rs * tri[0] * div).reshape(npt, N).sum(axis=1)
            vals.append((vec, sig))
        (A, s0), (Ar, sr), (Az, sz) = vals
        im_r = 1j * m / r
        cu = np.stack([im_r * A[2] - Az[1], Az[0] - Ar[2], A[1] / r + Ar[1] - im_r * A[0]], axis=1)
        grad = np.stack([sr, im_r * s0, sz], axis=1)
        c2v = k ** 2 * np.stack(A, axis=1) + grad
        e = np.exp(1j * m * phi)[:, None]
        curl += e * cu
        cc += e * c2v
    return _to_cartesian(curl, phi), _to_cartesian(cc, phi)


def _to_cartesian(v, phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([v[:, 0] * c - v[:, 1] * s, v[:, 0] * s + v[:, 1] * c, v[:, 2]], axis=1)


def eval_fields(sol, points, region="exterior"):
    """E and H at points away from the surface, using the solution's representation."""
    pts, r = _check_points(sol.mesh, points)
    med = sol.media
    e0, m0, e1, m1 = (complex(med.eps0), complex(med.mu0), complex(med.eps1), complex(med.mu1))
    iw = 1j * med.omega
    if region == "exterior":
        k = med.k0
        cJ, ccJ = _layer_potentials(sol, pts, r, k, 0)
        cM, ccM = _layer_potentials(sol, pts, r, k, 1)
        return -ccJ / (iw * e0) + cM, ccM / (iw * m0) + cJ
    if region != "interior":
        raise ValueError("region must be 'interior' or 'exterior'")
    k = med.k1
    cJ, ccJ = _layer_potentials(sol, pts, r, k, 0)
    cM, ccM = _layer_potentials(sol, pts, r, k, 1)
    if sol.kind == "direct":
        return ccJ / (iw * e1) - cM, -ccM / (iw * m1) - cJ
    return -ccJ / (iw * e0) + (m1 / m0) * cM, ccM / (iw * m0) + (e1 / e0) * cJ


# far field -------------------------------------------------------------------

def far_field(sol, thetas, phis):
    """|E_inf| at directions with azimuth thetas and polar angles phis (broadcast)."""
    th, ph = np.broadcast_arrays(np.asarray(thetas, dtype=float), np.asarray(phis, dtype=float))
    shape = th.shape
    th, ph = th.ravel(), ph.ravel()
    mesh, med = sol.mesh, sol.media
    k0 = med.k0
    e0 = complex(med.eps0)
    xh = np.stack([np.cos(th) * np.sin(ph), np.sin(th) * np.sin(ph), np.cos(ph)], axis=1)
    beta = k0 * np.outer(np.sin(ph), mesh.r)
    phase = np.exp(-1j * k0 * np.outer(np.cos(ph), mesh.z)) * (mesh.r * mesh.w)[None, :]
    tr, tz = mesh.dr / mesh.speed, mesh.dz / mesh.speed
    aJ = np.zeros((len(th), 3), dtype=complex)
    aM = np.zeros((len(th), 3), dtype=complex)
    sJ = np.zeros(len(th), dtype=complex)
    nf = sol.n_f
    B = {n: 2 * np.pi * (-1j) ** n * jv(n, beta) * np.exp(1j * n * th)[:, None] * phase
         for n in range(-nf - 1, nf + 2)}
    for m in sol.modes:
        cur = sol.mode(m)
        bp, bm, b0 = B[m + 1], B[m - 1], B[m]
        div = surface_divergence(mesh, cur[0], cur[1], m)
        sJ += b0 @ div
        for which, acc in ((0, aJ), (1, aM)):
            F1, F2 = cur[2 * which], cur[2 * which + 1]
            Fr, Ft, Fz = F1 * tr, F2, F1 * tz
            acc[:, 0] += (bp + bm) @ Fr * 0.5 - (bp - bm) @ Ft / 2j
            acc[:, 1] += (bp - bm) @ Fr / 2j + (bp + bm) @ Ft * 0.5
            acc[:, 2] += b0 @ Fz
    iw = 1j * med.omega
    E = ((k0 ** 2 * aJ + 1j * k0 * xh * sJ[:, None]) / (iw * e0)
         - 1j * k0 * np.cross(xh, aM)) / (4 * np.pi)
    return np.linalg.norm(E, axis=1).reshape(shape)


# extinction test ---------------------------------------------------------------

def _inside(poly_r, poly_z, r, z):
    """Even-odd test against the closed polygon (curve plus axis segment)."""
    inside = np.zeros(r.shape, dtype=bool)
    n = len(poly_r)
    for i in range(n):
        r1, z1 = poly_r[i], poly_z[i]
        r2, z2 = poly_r[(i + 1) % n], poly_z[(i + 1) % n]
        cross = (z1 > z) != (z2 > z)
        with np.errstate(divide="ignore", invalid="ignore"):
            rx = r1 + (z - z1) * (r2 - r1) / (z2 - z1)
        inside ^= cross & (r < rx)
    return inside


def probe_points(mesh, n=10, seed=0):
    """n deterministic points inside the body, at least one panel length from the surface."""
    curve = mesh.curve
    t = np.linspace(curve.t_a, curve.t_b, 4001)
    pr, pz, _, _ = curve.eval(t)
    rng = np.random.default_rng(seed)
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 200:
            raise ProbeError("could not place probe points inside the body")
        rr = rng.uniform(0, pr.max(), 512)
        zz = rng.uniform(pz.min(), pz.max(), 512)
        ok = _inside(pr, pz, rr, zz) & (rr > 1e-3)
        rr, zz = rr[ok], zz[ok]
        if rr.size:
            good = _min_panel_clearance(mesh, rr, zz) >= 1.0
            for a, b in zip(rr[good], zz[good]):
                if len(out) < n:
                    out.append((a, b, rng.uniform(0, 2 * np.pi)))
    a = np.array(out)
    return np.stack([a[:, 0] * np.cos(a[:, 2]), a[:, 0] * np.sin(a[:, 2]), a[:, 1]], axis=1)


def extinction_loop(media, center=(0.4, 0.5, 5.0), radius=0.42):
    return CurrentLoop(center, radius, media.k1, media.omega, complex(media.mu1))


def extinction_error(sol, probes, exact):
    """Relative l2 error of interior (E, H) against ``exact.fields`` over the probes."""
    probes = np.atleast_2d(probes)
    if probes.size == 0:
        raise ProbeError("no probe points")
    E, H = eval_fields(sol, probes, "interior")
    Ee, He = exact.fields(probes)
    num = np.sqrt(np.sum(np.abs(E - Ee) ** 2) + np.sum(np.abs(H - He) ** 2))
    den = np.sqrt(np.sum(np.abs(Ee) ** 2) + np.sum(np.abs(He) ** 2))
    return float(num / den)
