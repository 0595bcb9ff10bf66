"""Nystrom discretisation of the modal layer potentials and Muller systems.

Densities are sampled at the Gauss-Legendre nodes of every panel.  A
target interacts with far panels through the plain Gauss weights; for its
own panel and the two neighbours the integral of kernel times the
interpolating polynomial is computed with a generalized Gaussian rule,
whose support nodes need the kernel at points that are not nodes.

The unknown vector of mode m is (J1, J2, M1, M2), node-major inside each
block, where 1 is the component along the unit tangent and 2 along e_theta.
Rows hold the tangential and azimuthal components of the two boundary
equations.
"""
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from . import ggq
from .geometry import gauss_legendre
from .modalgreen import KERNEL_TOL, modal_kernels

PAIRS_PER_CHUNK = 60000


class MediaError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Media:
    eps0: complex = 1.0
    mu0: complex = 1.0
    eps1: complex = 1.0
    mu1: complex = 1.0
    omega: float = 1.0

    def __post_init__(self):
        if not self.omega > 0:
            raise MediaError("omega must be positive")
        for name in ("eps0", "mu0", "eps1", "mu1"):
            v = complex(getattr(self, name))
            if not (v.real > 0 and v.imag >= 0):
                raise MediaError(f"{name} needs a positive real part and nonnegative imaginary part")

    @classmethod
    def from_wavenumbers(cls, k0, k1, omega=1.0):
        """Nonmagnetic media (mu = 1) with eps = (k / omega)^2."""
        if not k0 > 0:
            raise MediaError("k0 must be positive")
        if not omega > 0:
            raise MediaError("omega must be positive")
        return cls((k0 / omega) ** 2, 1.0, (k1 / omega) ** 2, 1.0, float(omega))

    @property
    def k0(self):
        return _wavenumber(self.omega, self.eps0, self.mu0)

    @property
    def k1(self):
        return _wavenumber(self.omega, self.eps1, self.mu1)


def _wavenumber(omega, eps, mu):
    k = omega * np.sqrt(complex(eps) * complex(mu))
    if k.imag < 0:
        k = -k
    return k.real if k.imag == 0 else k


# Legendre machinery ---------------------------------------------------------

@lru_cache(maxsize=None)
def legendre_transform(p):
    """Matrix U taking nodal values to Legendre coefficients."""
    x, w = gauss_legendre(p)
    P, _ = ggq.legendre_with_derivative(x, p)
    U = (np.arange(p)[:, None] + 0.5) * P * w[None, :]
    U.flags.writeable = False
    return U


def interpolation_matrix(y, p):
    """Values at y of the Lagrange basis on the p Gauss nodes, shape (len(y), p)."""
    P, _ = ggq.legendre_with_derivative(np.asarray(y, dtype=float).ravel(), p)
    return P.T @ legendre_transform(p)


@lru_cache(maxsize=None)
def differentiation_matrix(p):
    """d/dy of the interpolant, evaluated at the nodes."""
    x, _ = gauss_legendre(p)
    _, D = ggq.legendre_with_derivative(x, p)
    return D.T @ legendre_transform(p)


# interaction plan ------------------------------------------------------------

@dataclass
class NearBlock:
    """Support points of one (target panel, source panel) interaction.

    y, weight have shape (p, nq): per target node the rule nodes and the
    full quadrature weights (rule weight * half length * ds/dt).  interp
    has shape (p, nq, p).
    """
    source: int
    t: np.ndarray
    weight: np.ndarray
    interp: np.ndarray


@dataclass
class Plan:
    mesh: object
    near: list
    far: list
    src: dict = field(default_factory=dict)


def _turn_angle(curve, t):
    eps = 1e-10 * (curve.t_b - curve.t_a)
    _, _, dr, dz = curve.eval(np.array([t - eps, t + eps]))
    a = np.arctan2(dz, dr)
    d = (a[1] - a[0] + np.pi) % (2 * np.pi) - np.pi
    return abs(float(d))


def _shared_point(mesh, i, j):
    a, b = mesh.panels[i], mesh.panels[j]
    if abs(a.t1 - b.t0) < 1e-13:
        return a.t1, 1
    if abs(b.t1 - a.t0) < 1e-13:
        return a.t0, 0
    # wrap-around neighbour on a closed curve
    return (mesh.curve.t_a, 0) if i == 0 else (mesh.curve.t_b, 1)


def _rule_block(mesh, i, y, w):
    pn = mesh.panels[i]
    half = 0.5 * (pn.t1 - pn.t0)
    mid = 0.5 * (pn.t1 + pn.t0)
    return mid + half * y, half * w


def build_plan(mesh, rules=None):
    """Decide, for every target panel, how each source panel is integrated."""
    p = mesh.p
    rules = rules or ggq.load_rules(p)
    curve = mesh.curve
    n = mesh.n_panels
    axis_end = {}
    if curve.axis_ends[0]:
        axis_end[0] = (0, 2 * curve.axis_angle(0))
    if curve.axis_ends[1]:
        axis_end[n - 1] = (1, 2 * curve.axis_angle(1))
    near_all, far_all = [], []
    for i in range(n):
        blocks = []
        near_set = [i] + mesh.neighbors(i)
        for j in near_set:
            if j == i:
                rows = []
                for k in range(p):
                    if i in axis_end:
                        end, angle = axis_end[i]
                        rows.append(rules.axis_rule(k, angle, end))
                    else:
                        rows.append(rules.self_rule(k))
                nq = max(len(r[0]) for r in rows)
                Y = np.zeros((p, nq))
                W = np.zeros((p, nq))
                for k, (y, w) in enumerate(rows):
                    Y[k, :len(y)] = y
                    Y[k, len(y):] = y[0]
                    W[k, :len(w)] = w
            else:
                tp, side = _shared_point(mesh, j, i)
                interior = tp not in (curve.t_a, curve.t_b) or curve.closed
                turn = _turn_angle(curve, tp) if interior and tp in curve.corners else 0.0
                y, w = rules.corner_rule(turn) if turn > 1e-8 else rules.adjacent_rule()
                Y = np.broadcast_to(y, (p, len(y)))
                W = np.broadcast_to(w, (p, len(w)))
            T, Wt = _rule_block(mesh, j, Y, W)
            _, _, dr, dz = curve.eval(T)
            L = interpolation_matrix(Y.ravel(), p).reshape(p, Y.shape[1], p)
            blocks.append(NearBlock(j, T, Wt * np.hypot(dr, dz), L))
        near_all.append(blocks)
        far_panels = [j for j in range(n) if j not in near_set]
        far_all.append(np.concatenate([np.arange(j * p, (j + 1) * p) for j in far_panels])
                       if far_panels else np.zeros(0, dtype=int))
    return Plan(mesh, near_all, far_all)


# pair geometry and kernel entries ------------------------------------------

@dataclass
class PairSet:
    rt: np.ndarray
    zt: np.ndarray
    trt: np.ndarray
    tzt: np.ndarray
    rs: np.ndarray
    zs: np.ndarray
    trs: np.ndarray
    tzs: np.ndarray


def _source_geometry(curve, t):
    r, z, dr, dz = curve.eval(t)
    sp = np.hypot(dr, dz)
    return r, z, dr / sp, dz / sp


def _panel_pairs(plan, i):
    """All (target, source) pairs for target panel i, far pairs first."""
    mesh = plan.mesh
    p = mesh.p
    rows = np.arange(i * p, (i + 1) * p)
    far = plan.far[i]
    tr, tz = mesh.dr / mesh.speed, mesh.dz / mesh.speed
    parts_t = [np.repeat(rows, far.size)]
    src_r = [np.tile(mesh.r[far], p)]
    src_z = [np.tile(mesh.z[far], p)]
    src_tr = [np.tile(tr[far], p)]
    src_tz = [np.tile(tz[far], p)]
    for blk in plan.near[i]:
        nq = blk.t.shape[1]
        parts_t.append(np.repeat(rows, nq))
        r, z, a, b = _source_geometry(mesh.curve, blk.t.ravel())
        src_r.append(r)
        src_z.append(z)
        src_tr.append(a)
        src_tz.append(b)
    tgt = np.concatenate(parts_t)
    return PairSet(mesh.r[tgt], mesh.z[tgt], tr[tgt], tz[tgt],
                   np.concatenate(src_r), np.concatenate(src_z),
                   np.concatenate(src_tr), np.concatenate(src_tz))


def _trio(G, m):
    """g1, g2, g3 of mode m from coefficients stored for m >= 0."""
    a = G[:, abs(m)]
    up = G[:, abs(m + 1)]
    dn = G[:, abs(m - 1)]
    return a, 0.5 * (up + dn), 0.5 * (dn - up)


def _c_columns(ps, g1, g2, g3):
    """(c1, c2, c3) produced by unit J1 and by unit J2 at the source."""
    rs, trs, tzs = ps.rs, ps.trs, ps.tzs
    j1 = (rs * trs * g2, 1j * rs * trs * g3, rs * tzs * g1)
    j2 = (-1j * rs * g3, rs * g2, 0.0 * g1)
    return j1, j2


def _n_entries(ps, m, val, dr, dz):
    """Tangential and azimuthal rows of n x curl S for both source components."""
    cv = _c_columns(ps, *val)
    cr = _c_columns(ps, *dr)
    cz = _c_columns(ps, *dz)
    im_r = 1j * m / ps.rt
    out = []
    for col in range(2):
        c1, c2, c3 = cv[col]
        r1, r2, r3 = cr[col]
        z1, z2, z3 = cz[col]
        nt = z1 - r3
        nth = -ps.trt * (im_r * c3 - z2) - ps.tzt * (c2 / ps.rt + r2 - im_r * c1)
        out.append((nt, nth))
    # order: (t <- J1, t <- J2, theta <- J1, theta <- J2)
    return [out[0][0], out[1][0], out[0][1], out[1][1]]


def _kd_entries(ps, m, k0, k1, v0, v1, dv, dr, dz, rr, rz, zz):
    """n x curl curl (S^k0 - S^k1), built from difference kernels only."""
    c0 = _c_columns(ps, *v0)
    c1k = _c_columns(ps, *v1)
    cd = _c_columns(ps, *dv)
    cr = _c_columns(ps, *dr)
    cz = _c_columns(ps, *dz)
    crr = _c_columns(ps, *rr)
    crz = _c_columns(ps, *rz)
    czz = _c_columns(ps, *zz)
    r = ps.rt
    im_r = 1j * m / r
    out = []
    for col in range(2):
        a1, a2, a3 = cd[col]
        D = a1 / r + cr[col][0] + im_r * a2 + cz[col][2]
        Dr = (-a1 / r ** 2 + cr[col][0] / r + crr[col][0] - im_r / r * a2
              + im_r * cr[col][1] + crz[col][2])
        Dz = cz[col][0] / r + crz[col][0] + im_r * cz[col][1] + czz[col][2]
        kc = [k0 ** 2 * c0[col][q] - k1 ** 2 * c1k[col][q] for q in range(3)]
        kt = kc[1] + im_r * D
        kth = -(ps.trt * (kc[0] + Dr) + ps.tzt * (kc[2] + Dz))
        out.append((kt, kth))
    return [out[0][0], out[1][0], out[0][1], out[1][1]]


def operator_entries(K, ps, m, k0, k1):
    """Per-pair entries of N^k0, N^k1 and K^k0 - K^k1 for mode m.

    Returns (N0, N1, KD), each a list of four arrays ordered as
    (t<-1, t<-2, theta<-1, theta<-2).
    """
    g0 = _trio(K[0], m)
    g1 = _trio(K[1], m)
    dr0 = _trio(K[2], m)
    dz0 = _trio(K[3], m)
    drd = _trio(K[4], m)
    dzd = _trio(K[5], m)
    dr1 = tuple(a - b for a, b in zip(dr0, drd))
    dz1 = tuple(a - b for a, b in zip(dz0, dzd))
    N0 = _n_entries(ps, m, g0, dr0, dz0)
    N1 = _n_entries(ps, m, g1, dr1, dz1)
    dv = tuple(a - b for a, b in zip(g0, g1))
    KD = _kd_entries(ps, m, k0, k1, g0, g1, dv, drd, dzd,
                     _trio(K[6], m), _trio(K[7], m), _trio(K[8], m))
    return N0, N1, KD


# generic Nystrom accumulation ---------------------------------------------

def _accumulate(plan, k0, k1, modes, entry_fn, sink, tol=KERNEL_TOL, panels=None, stats=None):
    """Evaluate kernels panel by panel and hand quadrature-weighted entries to ``sink``.

    ``entry_fn(K, ps, m)`` returns a list of per-pair arrays; ``sink(mi, blk,
    rows, cols)`` receives, for mode index mi, an array of shape
    (n_entries, p, ncols) to be added at target rows / source cols.
    """
    mesh = plan.mesh
    M = max(abs(m) for m in modes)
    panels = list(range(mesh.n_panels) if panels is None else panels)
    batches, cur, size = [], [], 0
    for i in panels:
        cur.append(i)
        size += mesh.p * (plan.far[i].size + sum(b.t.shape[1] for b in plan.near[i]))
        if size >= PAIRS_PER_CHUNK:
            batches.append(cur)
            cur, size = [], 0
    if cur:
        batches.append(cur)
    for batch in batches:
        sets = [_panel_pairs(plan, i) for i in batch]
        allp = PairSet(*[np.concatenate([getattr(ps, f) for ps in sets])
                         for f in PairSet.__dataclass_fields__])
        t0 = time.perf_counter()
        K = modal_kernels(allp.rt, allp.zt, allp.rs, allp.zs, k0, k1, M, tol=tol)
        if stats is not None:
            stats["kernel"] = stats.get("kernel", 0.0) + time.perf_counter() - t0
        for mi, m in enumerate(modes):
            ent = np.array(entry_fn(K, allp, m))
            off = 0
            for i, ps in zip(batch, sets):
                n = ps.rt.size
                _scatter(plan, i, ent[:, off:off + n], mi, sink)
                off += n


def _scatter(plan, i, e, mi, sink):
    mesh = plan.mesh
    p = mesh.p
    rows = np.arange(i * p, (i + 1) * p)
    far = plan.far[i]
    nf = far.size * p
    if far.size:
        blk = e[:, :nf].reshape(e.shape[0], p, far.size) * mesh.w[far][None, None, :]
        sink(mi, blk, rows, far)
    off = nf
    for nb in plan.near[i]:
        nq = nb.t.shape[1]
        seg = e[:, off:off + p * nq].reshape(e.shape[0], p, nq) * nb.weight[None]
        off += p * nq
        blk = np.einsum("eaq,aqk->eak", seg, nb.interp)
        sink(mi, blk, rows, np.arange(nb.source * p, (nb.source + 1) * p))


# c blocks (exposed for testing and field work) ------------------------------

C_LABELS = ("c1", "c2", "c3", "dr_c1", "dr_c2", "dr_c3", "dz_c1", "dz_c2", "dz_c3")


def assemble_c_blocks(mesh, k, m, derivative_order=0, k_pair=None, plan=None):
    """Matrices taking nodal (J1, J2) of mode m to c1, c2, c3 at the nodes.

    Returns an array of shape (n_quantities, N, 2N).  derivative_order 0
    gives c1..c3, 1 adds their r and z target derivatives, and "2diff"
    returns the rr, rz, zz second derivatives of the k_pair difference.
    """
    plan = plan or build_plan(mesh)
    N = mesh.n_points
    if derivative_order == "2diff":
        if k_pair is None:
            raise ValueError("second derivatives need a wavenumber pair")
        ka, kb = k_pair
        rows_sel = (6, 7, 8)
    else:
        ka, kb = k, k
        rows_sel = (0,) if derivative_order == 0 else (0, 2, 3)

    def entry(K, ps, mm):
        out = []
        for row in rows_sel:
            src = K[row] if row else K[0]
            j1, j2 = _c_columns(ps, *_trio(src, mm))
            for q in range(3):
                out.extend([j1[q], j2[q]])
        return out

    nq = 3 * len(rows_sel)
    out = np.zeros((nq, N, 2 * N), dtype=complex)

    def sink(mi, blk, rows, cols):
        for q in range(nq):
            out[q][np.ix_(rows, cols)] += blk[2 * q]
            out[q][np.ix_(rows, cols + N)] += blk[2 * q + 1]

    _accumulate(plan, ka, kb, [m], entry, sink)
    return out


# mode systems ---------------------------------------------------------------

@dataclass
class ModalSystem:
    m: int
    kind: str
    matrix: np.ndarray
    sqrt_w: np.ndarray
    lu: tuple = None
    rcond: float = None

    @property
    def n_unknowns(self):
        return 4 * self.sqrt_w.size

    def scale_rhs(self, b):
        return np.tile(self.sqrt_w, 4)[:, None] * b.reshape(self.n_unknowns, -1)

    def unscale(self, x):
        return x / np.tile(self.sqrt_w, 4)[:, None]


def mirror_signs(N):
    """Diagonal of P with A_{-m} = -P A_m P."""
    return np.concatenate([np.ones(N), -np.ones(N), -np.ones(N), np.ones(N)])


def formulation_coefficients(kind, media):
    """Block coefficients of the 2x2 operator layout.

    Returns dict with identity terms (EM, HJ), the K-difference factors
    (EJ, HM) and which N-combination feeds the E rows.
    """
    e0, m0, e1, m1, w = (complex(media.eps0), complex(media.mu0), complex(media.eps1),
                         complex(media.mu1), media.omega)
    iw = 1j * w
    if kind == "indirect":
        return dict(EJ=m0 / e0, HM=-e0 / m0, EM_id=-0.5 * iw * (m0 + m1), HJ_id=-0.5 * iw * (e0 + e1),
                    E_uses="mu", rhs_E=iw * m0, rhs_H=iw * e0)
    if kind == "direct":
        return dict(EJ=1.0, HM=-1.0, EM_id=0.5 * iw * (e0 + e1), HJ_id=0.5 * iw * (m0 + m1),
                    E_uses="eps", rhs_E=iw * e0, rhs_H=iw * m0)
    raise ValueError(f"unknown formulation {kind!r}")


def assemble_mode_matrices(kind, mesh, media, modes, plan=None, tol=KERNEL_TOL, weighted=True, stats=None):
    """Dense 4N x 4N matrices for the given (nonnegative or any) modes."""
    plan = plan or build_plan(mesh)
    N = mesh.n_points
    co = formulation_coefficients(kind, media)
    k0, k1 = media.k0, media.k1
    e0, m0, e1, m1 = (complex(media.eps0), complex(media.mu0), complex(media.eps1), complex(media.mu1))
    iw = 1j * media.omega
    if co["E_uses"] == "mu":
        aE, bE, aH, bH = m1, m0, e1, e0
    else:
        aE, bE, aH, bH = e1, e0, m1, m0
    mats = np.zeros((len(modes), 4 * N, 4 * N), dtype=complex)

    def entry(K, ps, m):
        N0, N1, KD = operator_entries(K, ps, m, k0, k1)
        XE = [iw * (aE * a - bE * b) for a, b in zip(N1, N0)]
        XH = [iw * (aH * a - bH * b) for a, b in zip(N1, N0)]
        return ([co["EJ"] * x for x in KD] + XE + XH + [co["HM"] * x for x in KD])

    # entry layout: 4 per block, (t<-1, t<-2, th<-1, th<-2); blocks EJ, EM, HJ, HM
    placement = []
    for b, (r0, c0) in enumerate(((0, 0), (0, 2), (2, 0), (2, 2))):
        for e, (dr, dc) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            placement.append((4 * b + e, (r0 + dr) * N, (c0 + dc) * N))

    def sink(mi, blk, rows, cols):
        A = mats[mi]
        for idx, ro, cofs in placement:
            A[np.ix_(rows + ro, cols + cofs)] += blk[idx]

    if k0 != k1:
        _accumulate(plan, k0, k1, list(modes), entry, sink, tol=tol, stats=stats)
    diag = np.arange(N)
    for mi in range(len(modes)):
        A = mats[mi]
        for blk in range(2):
            A[diag + blk * N, diag + (2 + blk) * N] += co["EM_id"]
            A[diag + (2 + blk) * N, diag + blk * N] += co["HJ_id"]
    sw = np.sqrt(mesh.w)
    out = []
    for mi, m in enumerate(modes):
        A = mats[mi]
        if weighted:
            s = np.tile(sw, 4)
            A *= s[:, None]
            A /= s[None, :]
        out.append(ModalSystem(m, kind, A, sw if weighted else np.ones(N)))
    return out


def assemble_mode_matrix(kind, mesh, media, m, plan=None, tol=KERNEL_TOL, weighted=True):
    return assemble_mode_matrices(kind, mesh, media, [m], plan=plan, tol=tol, weighted=weighted)[0]


def factorize(system, overwrite=True):
    """LU-factorize in place and record the reciprocal 1-norm condition estimate."""
    A = system.matrix
    anorm = np.linalg.norm(A, 1)
    lu, piv = sla.lu_factor(A, overwrite_a=overwrite, check_finite=True)
    rcond, info = sla.lapack.zgecon(lu, anorm, norm="1")
    system.lu = (lu, piv)
    system.rcond = float(rcond)
    if overwrite:
        system.matrix = None
    if rcond < np.finfo(float).eps:
        raise SingularSystemError(f"mode {system.m}: matrix singular to working precision "
                                  f"(condition estimate {1 / max(rcond, 1e-300):.2e})")
    return system


def condition_number(system):
    return 1.0 / system.rcond if system.rcond else np.inf


def solve(system, rhs, mirror=False):
    """Solve for unweighted rhs (4N or 4N x k); mirror=True solves the -m system."""
    if system.lu is None:
        factorize(system, overwrite=False)
    b = np.asarray(rhs, dtype=complex)
    shape = b.shape
    N = system.n_unknowns // 4
    b = b.reshape(4 * N, -1)
    if mirror:
        b = mirror_signs(N)[:, None] * b
    x = sla.lu_solve(system.lu, system.scale_rhs(b))
    x = system.unscale(x)
    if mirror:
        x = -mirror_signs(N)[:, None] * x
    return x.reshape(shape)


def quadrature_row(mesh, target, source_panel, kernel, plan=None):
    """Row of the quadrature kernel Q for one target node and one source panel.

    ``kernel(x_target, points)`` returns kernel values at arbitrary source
    points given as an (n, 4) array of (r, z, r', z') with unit tangents.
    """
    plan = plan or build_plan(mesh)
    p = mesh.p
    i = target // p
    n = target % p
    tgt = np.array([mesh.r[target], mesh.z[target], mesh.dr[target] / mesh.speed[target],
                    mesh.dz[target] / mesh.speed[target]])
    for blk in plan.near[i]:
        if blk.source == source_panel:
            r, z, a, b = _source_geometry(mesh.curve, blk.t[n])
            vals = kernel(tgt, np.stack([r, z, a, b], axis=1))
            return (vals * blk.weight[n]) @ blk.interp[n]
    sl = mesh.panel_slice(source_panel)
    pts = np.stack([mesh.r[sl], mesh.z[sl], mesh.dr[sl] / mesh.speed[sl], mesh.dz[sl] / mesh.speed[sl]], axis=1)
    return kernel(tgt, pts) * mesh.w[sl]
