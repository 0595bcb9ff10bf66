"""Azimuthal Fourier coefficients of the Helmholtz kernel between two rings.

For a target ring (r_t, z_t) and a source ring (r_s, z_s) the coefficients

    g1[m] = int_0^{2pi} G(rho(phi)) exp(-i m phi) dphi,   G = exp(i k rho) / (4 pi rho)

are computed together with their target derivatives d/dr_t, d/dz_t and the
second derivatives of the difference kernel G_{k0} - G_{k1}.

Every integrand is written as  smooth(phi) + smooth(phi) * sing(phi)  with
sing = 1/(4 pi rho) or 1/(4 pi rho^3).  For nearly touching rings the
singular factor is replaced by its Fourier series truncated at M_q terms,
whose coefficients come from the half-order Legendre recurrences; the
product is then transformed exactly by one FFT of length >= 2 M_q + 1 (no
aliasing reaches the requested modes).  For well separated rings the
singular factor is sampled directly.  Both routes share the same sampling
kernel, so the per-pair sequences are computed once and reused by all nine
quantities.

The smooth factors are entire functions of k rho; near rho = 0 they are
evaluated from their Taylor series so that no 0/0 cancellation occurs.
"""
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy import fft as sfft

from ._accel import njit, use_numba
from .specfun import legendre_q_batch, s_from_q

KERNEL_TOL = 1e-12
MAX_BANDWIDTH = 1 << 14
FAR_RHO_RATIO = 0.2
FAR_CHIM1 = 1.0
SERIES_RADIUS = 1.0
NSER = 14

QUANTITIES = ("g_k0", "g_k1", "dr_k0", "dz_k0", "dr_diff", "dz_diff", "rr_diff", "rz_diff", "zz_diff")

_C4 = 1.0 / (4.0 * np.pi)


class BandwidthError(RuntimeError):
    pass


def _series_table():
    sinc = np.array([(-1) ** i / factorial(2 * i + 1) for i in range(NSER)])
    # coefficient of x^(2i) after removing the leading power
    u2 = np.array([(-1) ** (i + 1) * (1 - 2 * (i + 1)) / factorial(2 * i + 2) for i in range(NSER)])
    v2 = np.array([(-1) ** (i + 1) * (2 * i + 1) * (2 * i - 1) / factorial(2 * i + 2) for i in range(NSER)])
    t3 = np.array([(-1) ** (i + 1) * 2 * (i + 1) / factorial(2 * i + 3) for i in range(NSER)])
    w5 = np.array([(-1) ** (i + 2) * 4 * (i + 2) * (i + 1) / factorial(2 * i + 5) for i in range(NSER)])
    return np.stack([sinc, u2, v2, t3, w5])


_SER = _series_table()


@njit
def _blocks_scalar(x):
    # sin(x)/x, (u-1)/x^2, (v-3)/x^2, t/x^3, w/x^5 with
    # u = cos x + x sin x, v = (3-x^2) cos x + 3x sin x,
    # t = x cos x - sin x,  w = (3-x^2) sin x - 3x cos x.
    if abs(x) < SERIES_RADIUS:
        xx = x * x
        out0 = 0j
        out1 = 0j
        out2 = 0j
        out3 = 0j
        out4 = 0j
        for i in range(NSER - 1, -1, -1):
            out0 = out0 * xx + _SER[0, i]
            out1 = out1 * xx + _SER[1, i]
            out2 = out2 * xx + _SER[2, i]
            out3 = out3 * xx + _SER[3, i]
            out4 = out4 * xx + _SER[4, i]
        return out0, out1, out2, out3, out4
    c = np.cos(x)
    s = np.sin(x)
    xx = x * x
    return (s / x,
            (c + x * s - 1.0) / xx,
            ((3.0 - xx) * c + 3.0 * x * s - 3.0) / xx,
            (x * c - s) / (xx * x),
            ((3.0 - xx) * s - 3.0 * x * c) / (xx * xx * x))


def _blocks_array(x):
    x = np.asarray(x, dtype=complex)
    small = np.abs(x) < SERIES_RADIUS
    out = [np.empty_like(x) for _ in range(5)]
    if np.any(small):
        xs = x[small]
        xx = xs * xs
        for row in range(5):
            acc = np.zeros_like(xs)
            for i in range(NSER - 1, -1, -1):
                acc = acc * xx + _SER[row, i]
            out[row][small] = acc
    big = ~small
    if np.any(big):
        xb = x[big]
        c = np.cos(xb)
        s = np.sin(xb)
        xx = xb * xb
        out[0][big] = s / xb
        out[1][big] = (c + xb * s - 1.0) / xx
        out[2][big] = ((3.0 - xx) * c + 3.0 * xb * s - 3.0) / xx
        out[3][big] = (xb * c - s) / (xx * xb)
        out[4][big] = ((3.0 - xx) * s - 3.0 * xb * c) / (xx * xx * xb)
    return out


@njit
def _sample_nb(rt, zt, rs, zs, s2, qg, pg, use_grid, k0, k1, out):
    npair = rt.shape[0]
    L = out.shape[2]
    h = s2.shape[0]
    for p in range(npair):
        dr0 = rt[p] - rs[p]
        dz = zt[p] - zs[p]
        base = dr0 * dr0 + dz * dz
        fac = 4.0 * rt[p] * rs[p]
        hr = 0.5 / rt[p]
        cr = (rt[p] * rt[p] - rs[p] * rs[p] - dz * dz) * hr
        for j in range(h):
            rho2 = base + fac * s2[j]
            rho = np.sqrt(rho2)
            rd = dr0 + 2.0 * rs[p] * s2[j]
            if use_grid:
                q = qg[p, j]
                pp = pg[p, j]
            else:
                q = _C4 / rho
                pp = _C4 / (rho * rho2)
            x0 = k0 * rho
            x1 = k1 * rho
            sc0, u0, v0, t0, w0 = _blocks_scalar(x0)
            sc1, u1, v1, t1, w1 = _blocks_scalar(x1)
            k0s = k0 * k0
            k1s = k1 * k1
            c0 = np.cos(x0)
            c1 = np.cos(x1)
            val0 = 1j * k0 * sc0 * _C4 + c0 * q
            val1 = 1j * k1 * sc1 * _C4 + c1 * q
            a1 = 1j * k0s * k0 * t0 * _C4
            b1 = 1.0 + x0 * x0 * u0
            f1d = 1j * (k0s * k0 * t0 - k1s * k1 * t1) * _C4 - (k0s * u0 - k1s * u1) * q
            a2 = 1j * (k0s * k0s * k0 * w0 - k1s * k1s * k1 * w1) * _C4
            b2 = k0s * v0 - k1s * v1
            rdp = cr * pp + q * hr
            rrp = cr * (rdp + q * hr) + rho2 * hr * q * hr
            vals = (val0, val1, a1 * rd - b1 * rdp, (a1 - b1 * pp) * dz, f1d * rd, f1d * dz,
                    a2 * rd * rd + b2 * rrp + f1d, (a2 * rd + b2 * rdp) * dz,
                    (a2 + b2 * pp) * dz * dz + f1d)
            for a in range(9):
                out[a, p, j] = vals[a]
                if j > 0 and L - j != j:
                    out[a, p, L - j] = vals[a]


def _sample_np(rt, zt, rs, zs, s2, qg, pg, use_grid, k0, k1, out):
    L = out.shape[2]
    h = s2.shape[0]
    dr0 = (rt - rs)[:, None]
    dz = (zt - zs)[:, None]
    rho2 = dr0 ** 2 + dz ** 2 + 4.0 * (rt * rs)[:, None] * s2[None, :]
    rho = np.sqrt(rho2)
    rd = dr0 + 2.0 * rs[:, None] * s2[None, :]
    if use_grid:
        q, pp = qg, pg
    else:
        q = _C4 / rho
        pp = _C4 / (rho * rho2)
    x0 = k0 * rho
    x1 = k1 * rho
    sc0, u0, v0, t0, w0 = _blocks_array(x0)
    sc1, u1, v1, t1, w1 = _blocks_array(x1)
    k0s, k1s = k0 * k0, k1 * k1
    a1 = 1j * k0s * k0 * t0 * _C4
    b1 = 1.0 + x0 * x0 * u0
    f1d = 1j * (k0s * k0 * t0 - k1s * k1 * t1) * _C4 - (k0s * u0 - k1s * u1) * q
    a2 = 1j * (k0s * k0s * k0 * w0 - k1s * k1s * k1 * w1) * _C4
    b2 = k0s * v0 - k1s * v1
    # r_d = cr + rho^2 hr, so r_d p = cr p + hr q; this avoids cancelling
    # neighbouring coefficients of the strongly peaked p.
    hr = (0.5 / rt)[:, None]
    cr = (rt ** 2 - rs ** 2 - (zt - zs) ** 2)[:, None] * hr
    rdp = cr * pp + q * hr
    rrp = cr * (rdp + q * hr) + rho2 * hr * q * hr
    half = [1j * k0 * sc0 * _C4 + np.cos(x0) * q,
            1j * k1 * sc1 * _C4 + np.cos(x1) * q,
            a1 * rd - b1 * rdp, (a1 - b1 * pp) * dz, f1d * rd, f1d * dz,
            a2 * rd * rd + b2 * rrp + f1d, (a2 * rd + b2 * rdp) * dz,
            (a2 + b2 * pp) * dz * dz + f1d]
    tail = np.arange(1, h)
    tail = tail[L - tail != tail]
    for a in range(9):
        out[a, :, :h] = half[a]
        out[a][:, L - tail] = half[a][:, tail]


def _sample(rt, zt, rs, zs, L, qg, pg, k0, k1):
    h = L // 2 + 1
    phi = 2.0 * np.pi * np.arange(h) / L
    s2 = np.sin(0.5 * phi) ** 2
    out = np.empty((9, rt.size, L), dtype=complex)
    use_grid = qg is not None
    if not use_grid:
        qg = pg = np.zeros((1, 1))
    if use_numba():
        _sample_nb(rt, zt, rs, zs, s2, qg, pg, use_grid, complex(k0), complex(k1), out)
    else:
        _sample_np(rt, zt, rs, zs, s2, qg, pg, use_grid, complex(k0), complex(k1), out)
    return out


def smooth_bandwidth(rt, zt, rs, zs, kabs, tol=KERNEL_TOL):
    """Number of Fourier modes needed by the smooth factors of a pair.

    Bounds the coefficients of an entire function of k*rho(phi) on the strip
    |Im phi| <= y: |c_n| <= exp(|k| max|rho| - n y), minimised over y.
    """
    rt = np.asarray(rt, dtype=float)
    A = rt ** 2 + np.asarray(rs) ** 2 + (np.asarray(zt) - np.asarray(zs)) ** 2
    B = 2.0 * rt * np.asarray(rs)
    y = np.geomspace(0.05, 16.0, 48)
    xr = kabs * np.sqrt(A[:, None] + B[:, None] * np.cosh(y)[None, :])
    need = (xr + np.log(1.0 / tol) + 2.0 * np.log1p(xr) + 2.0) / y[None, :]
    return np.ceil(need.min(axis=1)).astype(np.int64) + 3


def _singular_bandwidth(chim1, width, tol=KERNEL_TOL):
    a = np.log1p(chim1 + np.sqrt(chim1 * (chim1 + 2.0)))
    return np.ceil((np.log(1.0 / tol) + 3.0 * np.log(width + 10.0)) / a).astype(np.int64) + 4


_LADDER = None


def _fft_length(n):
    # Round up on a coarse ladder of fast lengths so few distinct sizes occur.
    global _LADDER
    if _LADDER is None:
        vals = []
        v = 16
        while v < 4 * MAX_BANDWIDTH + 64:
            vals.append(sfft.next_fast_len(v))
            v = int(v * 1.12) + 1
        _LADDER = np.unique(np.array(vals))
    i = np.searchsorted(_LADDER, n)
    return _LADDER[np.minimum(i, _LADDER.size - 1)]


def _near_grids(rt, rs, chim1, L):
    M_q = (L - 1) // 2
    q = legendre_q_batch(chim1, M_q)
    s = s_from_q(chim1, q)
    rr = rt * rs
    qhat = q / (2.0 * np.pi * np.sqrt(rr))[:, None]
    phat = s / (4.0 * np.pi * (2.0 * rr) ** 1.5)[:, None]
    h = L // 2 + 1
    qg = (L / (2.0 * np.pi)) * sfft.irfft(qhat, n=L, axis=1)[:, :h]
    pg = (L / (2.0 * np.pi)) * sfft.irfft(phat, n=L, axis=1)[:, :h]
    return np.ascontiguousarray(qg), np.ascontiguousarray(pg)


def _tail_ok(coef, start, tol):
    # coef: (P, L) FFT output; modes start..L//2 must be negligible.
    top = np.abs(coef).max(axis=1)
    stop = coef.shape[1] // 2 + 1
    if start >= stop:
        return np.ones(coef.shape[0], dtype=bool)
    tail = np.abs(coef[:, start:stop]).max(axis=1)
    return tail <= 10.0 * tol * np.maximum(top, 1e-300)


def _eval_group(rt, zt, rs, zs, chim1, L, far, k0, k1, M, N, tol):
    if far:
        qg = pg = None
    else:
        qg, pg = _near_grids(rt, rs, chim1, L)
    samples = _sample(rt, zt, rs, zs, L, qg, pg, k0, k1)
    coef = sfft.fft(samples, axis=2, overwrite_x=True)
    kbig = 0 if abs(k0) >= abs(k1) else 1
    if far:
        ok = _tail_ok(coef[kbig], L // 2, tol)
    else:
        # The truncated singular series is not small at high modes; test the
        # smooth factor alone instead.
        phi = 2.0 * np.pi * np.arange(L) / L
        rho = np.sqrt((rt - rs)[:, None] ** 2 + (zt - zs)[:, None] ** 2
                      + 4.0 * (rt * rs)[:, None] * np.sin(0.5 * phi)[None, :] ** 2)
        kk = (k0, k1)[kbig]
        fc = sfft.fft(np.cos(kk * rho), axis=1)
        ok = np.ones(rt.size, dtype=bool)
        for n in np.unique(N):
            sel = N == n
            ok[sel] = _tail_ok(fc[sel], int(n) + 1, tol)
    return coef[:, :, :M + 2] * (2.0 * np.pi / L), ok


def modal_kernels(rt, zt, rs, zs, k0, k1, M, tol=KERNEL_TOL, path="auto", chunk_elems=1 << 21):
    """All kernel coefficients for P ring pairs, modes m = 0..M+1.

    Returns a complex array of shape (9, P, M+2) whose rows follow
    ``QUANTITIES``: the kernel at k0 and k1, its r/z target derivatives at
    k0 and for the difference k0 - k1, and the rr, rz, zz second target
    derivatives of the difference kernel.  Coefficients of negative modes
    equal those of positive ones.
    """
    rt = np.ascontiguousarray(rt, dtype=float).ravel()
    zt = np.ascontiguousarray(zt, dtype=float).ravel()
    rs = np.ascontiguousarray(rs, dtype=float).ravel()
    zs = np.ascontiguousarray(zs, dtype=float).ravel()
    P = rt.size
    if np.any(rt <= 0) or np.any(rs <= 0):
        raise ValueError("ring radii must be positive")
    rho_min2 = (rt - rs) ** 2 + (zt - zs) ** 2
    if np.any(rho_min2 <= 0):
        raise ValueError("coincident rings")
    chim1 = rho_min2 / (2.0 * rt * rs)
    if path == "auto":
        far = (np.sqrt(rho_min2) >= FAR_RHO_RATIO * np.maximum(rt, rs)) | (chim1 >= FAR_CHIM1)
    else:
        far = np.full(P, path == "far")
    kabs = max(abs(k0), abs(k1))
    N = smooth_bandwidth(rt, zt, rs, zs, kabs, tol)
    out = np.empty((9, P, M + 2), dtype=complex)
    todo = np.arange(P)
    while todo.size:
        Nt = N[todo]
        if np.any(Nt > MAX_BANDWIDTH):
            raise BandwidthError("kernel bandwidth exceeds the hard cap")
        f = far[todo]
        near_len = 2 * (M + 1 + Nt + 3) + 1
        far_len = (M + 1) + (Nt + 3) + _singular_bandwidth(chim1[todo], M + Nt) + 2
        L = _fft_length(np.where(f, far_len, near_len))
        retry = []
        for key_far in (False, True):
            for Lv in np.unique(L[f == key_far]):
                sel = todo[(L == Lv) & (f == key_far)]
                step = max(1, chunk_elems // int(Lv))
                for i in range(0, sel.size, step):
                    s = sel[i:i + step]
                    coef, ok = _eval_group(rt[s], zt[s], rs[s], zs[s], chim1[s], int(Lv), key_far,
                                           k0, k1, M, N[s], tol)
                    out[:, s[ok]] = coef[:, ok]
                    retry.append(s[~ok])
        todo = np.concatenate(retry) if retry else np.empty(0, dtype=int)
        N[todo] *= 2
    return out


@dataclass(frozen=True)
class PairGeometry:
    r_t: float
    z_t: float
    r_s: float
    z_s: float

    def __post_init__(self):
        if not (self.r_t > 0 and self.r_s > 0):
            raise ValueError("ring radii must be positive")
        if self.rho_min <= 0:
            raise ValueError("coincident rings")

    @property
    def rho_min(self):
        return float(np.hypot(self.r_t - self.r_s, self.z_t - self.z_s))

    @property
    def chim1(self):
        return self.rho_min ** 2 / (2.0 * self.r_t * self.r_s)

    @property
    def chi(self):
        return 1.0 + self.chim1


@dataclass(frozen=True)
class ModalKernelBlock:
    """Kernel data for one pair over m = -M..M (index m + M)."""
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    dg1_dr: np.ndarray
    dg1_dz: np.ndarray
    d2_diff_rr: np.ndarray
    d2_diff_rz: np.ndarray
    d2_diff_zz: np.ndarray


def _single(pair, k0, k1, M, path):
    arr = lambda v: np.array([v], dtype=float)
    return modal_kernels(arr(pair.r_t), arr(pair.z_t), arr(pair.r_s), arr(pair.z_s),
                         k0, k1, M, path=path)[:, 0]


def _symmetric(pos, M):
    # pos holds m = 0..>=M; return m = -M..M
    return np.concatenate([pos[M:0:-1], pos[:M + 1]])


def eval_g1(pair, k, M, path="auto"):
    """``g1[m]`` for m = -M-1..M+1."""
    data = _single(pair, k, k, M, path)
    return _symmetric(data[0], M + 1)


def derive_g23(g1_ext):
    """``g2, g3`` over -M..M from ``g1`` over -M-1..M+1."""
    g1_ext = np.asarray(g1_ext)
    up = g1_ext[2:]
    down = g1_ext[:-2]
    return 0.5 * (up + down), (up - down) / 2j


def eval_dg1(pair, k, M, path="auto"):
    """``(d g1/d r_t, d g1/d z_t)`` over m = -M..M."""
    data = _single(pair, k, k, M, path)
    return _symmetric(data[2], M), _symmetric(data[3], M)


def eval_d2g1_diff(pair, k0, k1, M, path="auto"):
    """Second target derivatives (rr, rz, zz) of g1 at k0 minus g1 at k1, m = -M..M."""
    data = _single(pair, k0, k1, M, path)
    return _symmetric(data[6], M), _symmetric(data[7], M), _symmetric(data[8], M)


def kernel_block(pair, k0, k1, M, path="auto"):
    """Everything for one pair at wavenumber k0 (differences taken against k1)."""
    data = _single(pair, k0, k1, M + 1, path)
    g1 = _symmetric(data[0], M + 1)
    g2, g3 = derive_g23(g1)
    return ModalKernelBlock(g1[1:-1], g2, g3, _symmetric(data[2], M), _symmetric(data[3], M),
                            _symmetric(data[6], M), _symmetric(data[7], M), _symmetric(data[8], M))
