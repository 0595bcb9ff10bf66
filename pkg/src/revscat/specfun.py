"""Complete elliptic integrals and the half-order Legendre/power sequences.

For a pair of rings the azimuthal kernels depend on the single geometric
parameter ``chi = (r_t**2 + r_s**2 + (z_t - z_s)**2) / (2 r_t r_s) >= 1``.
The Fourier coefficients of ``(chi - cos phi)**(-1/2)``, ``**(-3/2)`` and
``**(-1)`` are

    Q[m] = Q_{m-1/2}(chi) = 8**-0.5 * int_0^{2pi} cos(m phi) / sqrt(chi - cos phi)
    S[m] = int_0^{2pi} cos(m phi) / (chi - cos phi)**1.5
    T[m] = int_0^{2pi} cos(m phi) / (chi - cos phi)

Near ``chi = 1`` the value ``chi - 1`` is tiny and cannot be formed from
``chi`` without cancellation, so every routine also accepts it directly
(``chim1``).  Callers holding the geometry should always pass it.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import njit, use_numba

AGM_TOL = 1e-15
MILLER_TOL = 1e-13
MILLER_CAP = 1 << 22
# Forward recurrence is used while sqrt(2(chi-1)) * (M_q+1) stays below this.
FORWARD_LIMIT = 0.5


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class HalfOrderSeq:
    chi: float
    q: np.ndarray


@dataclass(frozen=True)
class PowerSeqs:
    chi: float
    s: np.ndarray
    t: np.ndarray


def _agm_elliptic(ksq, kp):
    # K and E from the AGM of (1, k'); E/K = 1 - sum 2^(n-1) c_n^2, c_0 = k.
    a = np.ones_like(kp)
    b = np.array(kp, dtype=float, copy=True)
    csum = 0.5 * ksq
    scale = 0.5
    for _ in range(64):
        c = 0.5 * (a - b)
        a, b = 0.5 * (a + b), np.sqrt(a * b)
        scale *= 2.0
        csum = csum + scale * c * c
        if np.all(np.abs(a - b) <= AGM_TOL * a):
            break
    K = np.pi / (2.0 * a)
    return K, K * (1.0 - csum)


def complete_elliptic(k):
    """Complete elliptic integrals ``(K(k), E(k))`` for modulus ``0 <= k < 1``."""
    k_arr = np.asarray(k, dtype=float)
    if np.any(~np.isfinite(k_arr)) or np.any(k_arr < 0) or np.any(k_arr >= 1):
        raise DomainError("elliptic modulus must lie in [0, 1)")
    ksq = k_arr * k_arr
    kp = np.sqrt((1.0 - k_arr) * (1.0 + k_arr))
    K, E = _agm_elliptic(ksq, kp)
    if np.ndim(k) == 0:
        return float(K), float(E)
    return K, E


def _seeds(chim1):
    # Q_{-1/2}, Q_{1/2} and the E value (needed for S_0) from chi - 1.
    chim1 = np.asarray(chim1, dtype=float)
    chi = 1.0 + chim1
    ksq = 2.0 / (chi + 1.0)
    kp = np.sqrt(chim1 / (chi + 1.0))
    K, E = _agm_elliptic(ksq, kp)
    q0 = np.sqrt(ksq) * K
    q1 = chi * q0 - np.sqrt(2.0 * (chi + 1.0)) * E
    return q0, q1, E


def _acosh1p(x):
    return np.log1p(x + np.sqrt(x * (x + 2.0)))


def _miller_start(chim1, M_q):
    # Relative error of Miller's algorithm behaves like exp(-2 a (n_start - m)).
    a = _acosh1p(chim1)
    return M_q + 20 + np.ceil(20.0 / a).astype(np.int64)


@njit
def _q_seq_kernel(chim1, q0, q1, nstart, M_q, out):
    npair = chim1.shape[0]
    big = 1e250
    for p in range(npair):
        x = chim1[p]
        if nstart[p] < 0:
            out[p, 0] = q0[p]
            if M_q >= 1:
                out[p, 1] = q1[p]
            for i in range(1, M_q):
                out[p, i + 1] = (4.0 * i * (out[p, i] + x * out[p, i]) - (2.0 * i - 1.0) * out[p, i - 1]) / (2.0 * i + 1.0)
            continue
        hi = 0.0
        cur = 1e-280
        n0 = nstart[p]
        for j in range(M_q + 1):
            out[p, j] = 0.0
        if n0 <= M_q:
            out[p, n0] = cur
        for i in range(n0, 0, -1):
            lo = (4.0 * i * (cur + x * cur) - (2.0 * i + 1.0) * hi) / (2.0 * i - 1.0)
            hi = cur
            cur = lo
            if i - 1 <= M_q:
                out[p, i - 1] = cur
            if abs(cur) > big:
                cur /= big
                hi /= big
                for j in range(i - 1, M_q + 1):
                    out[p, j] /= big
        scale = q0[p] / out[p, 0]
        for j in range(M_q + 1):
            out[p, j] *= scale


def _q_seq_numpy(chim1, q0, q1, nstart, M_q, out):
    fwd = nstart < 0
    if np.any(fwd):
        x = chim1[fwd]
        blk = np.empty((x.size, M_q + 1))
        blk[:, 0] = q0[fwd]
        if M_q >= 1:
            blk[:, 1] = q1[fwd]
        for i in range(1, M_q):
            blk[:, i + 1] = (4.0 * i * (blk[:, i] + x * blk[:, i]) - (2.0 * i - 1.0) * blk[:, i - 1]) / (2.0 * i + 1.0)
        out[fwd] = blk
    idx = np.nonzero(~fwd)[0]
    if idx.size == 0:
        return
    # Group by start index (rounded up to powers of two) so each group shares a loop.
    starts = nstart[idx]
    keys = np.ceil(np.log2(starts)).astype(int)
    for key in np.unique(keys):
        sel = idx[keys == key]
        n0 = int(nstart[sel].max())
        x = chim1[sel]
        blk = np.zeros((sel.size, M_q + 1))
        hi = np.zeros(sel.size)
        cur = np.full(sel.size, 1e-280)
        if n0 <= M_q:
            blk[:, n0] = cur
        for i in range(n0, 0, -1):
            lo = (4.0 * i * (cur + x * cur) - (2.0 * i + 1.0) * hi) / (2.0 * i - 1.0)
            hi, cur = cur, lo
            if i - 1 <= M_q:
                blk[:, i - 1] = cur
            big = np.abs(cur) > 1e250
            if np.any(big):
                cur[big] /= 1e250
                hi[big] /= 1e250
                blk[big, max(i - 1, 0):] /= 1e250
        blk *= (q0[sel] / blk[:, 0])[:, None]
        out[sel] = blk


def legendre_q_batch(chim1, M_q):
    """``Q_{m-1/2}`` for ``m = 0..M_q`` at each ``chi = 1 + chim1``; shape (P, M_q+1)."""
    chim1 = np.ascontiguousarray(chim1, dtype=float).ravel()
    if np.any(~(chim1 > 0)):
        raise DomainError("chi must exceed 1")
    M_q = int(M_q)
    q0, q1, _ = _seeds(chim1)
    nstart = _miller_start(chim1, M_q)
    nstart[np.sqrt(2.0 * chim1) * (M_q + 1) <= FORWARD_LIMIT] = -1
    if np.any(nstart > MILLER_CAP):
        raise DomainError("backward recurrence start index exceeds cap")
    out = np.empty((chim1.size, M_q + 1))
    if use_numba():
        _q_seq_kernel(chim1, q0, q1, nstart, M_q, out)
    else:
        _q_seq_numpy(chim1, q0, q1, nstart, M_q, out)
    return out


def _forward_extended(chim1, M_q):
    # Forward recurrence amplifies seed rounding by about exp(2 m acosh chi);
    # running it in extended precision keeps the explicit forward route
    # usable well past the hot-path switch point.
    x = np.longdouble(chim1)
    one = np.longdouble(1)
    chi = one + x
    ksq = 2 / (chi + one)
    kp = np.sqrt(x / (chi + one))
    a, b = one, kp
    csum, scale = ksq / 2, one / 2
    for _ in range(64):
        c = (a - b) / 2
        a, b = (a + b) / 2, np.sqrt(a * b)
        scale *= 2
        csum += scale * c * c
        if abs(a - b) <= np.finfo(np.longdouble).eps * a:
            break
    K = 2 * np.arctan(one) / a
    E = K * (one - csum)
    q = np.empty(M_q + 1, dtype=np.longdouble)
    q[0] = np.sqrt(ksq) * K
    if M_q >= 1:
        q[1] = chi * q[0] - np.sqrt(2 * (chi + one)) * E
    for i in range(1, M_q):
        q[i + 1] = (4 * i * (q[i] + x * q[i]) - (2 * i - 1) * q[i - 1]) / (2 * i + 1)
    return q.astype(float)


def _miller_single(chim1, M_q, nstart):
    out = np.empty((1, M_q + 1))
    q0, q1, _ = _seeds(np.array([chim1]))
    _q_seq_numpy(np.array([chim1]), q0, q1, np.array([nstart]), M_q, out)
    return out[0]


def legendre_q_half_seq(chi, M_q, chim1=None, method="auto"):
    """Half-order Legendre functions ``Q_{m-1/2}(chi)``, ``m = 0..M_q``.

    ``method`` is ``"auto"`` (forward near chi = 1, Miller otherwise),
    ``"forward"`` or ``"miller"``.  The Miller branch here restarts with a
    doubled start index until the last value settles to ``MILLER_TOL``.
    """
    if chim1 is None:
        chim1 = float(chi) - 1.0
    chim1 = float(chim1)
    if not chim1 > 0:
        raise DomainError("chi must exceed 1")
    M_q = int(M_q)
    if M_q < 0:
        raise DomainError("M_q must be non-negative")
    if method == "auto":
        method = "forward" if np.sqrt(2 * chim1) * (M_q + 1) <= FORWARD_LIMIT else "miller"
    if method == "forward":
        return HalfOrderSeq(1.0 + chim1, _forward_extended(chim1, M_q))
    a = _acosh1p(chim1)
    n0 = M_q + max(20, int(np.ceil(10.0 / a)))
    prev = _miller_single(chim1, M_q, n0)
    last_change = np.inf
    while True:
        n0 *= 2
        if n0 > MILLER_CAP:
            raise DomainError("Miller recurrence did not converge")
        cur = _miller_single(chim1, M_q, n0)
        ref = abs(cur[-1]) if cur[-1] != 0 else 1.0
        change = abs(cur[-1] - prev[-1]) / ref
        # Once the truncation error is gone the change sits at the rounding
        # floor of the recurrence and stops shrinking.
        if change <= MILLER_TOL or (change < 1e-11 and change > 0.25 * last_change):
            return HalfOrderSeq(1.0 + chim1, cur)
        prev, last_change = cur, change


def s_from_q(chim1, q):
    """``S_m`` for ``m = 0..M_q`` from the matching ``Q`` rows (batched on axis 0)."""
    chim1 = np.asarray(chim1, dtype=float)
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    x = np.atleast_1d(chim1)[:, None]
    chi = 1.0 + x
    denom = x * (x + 2.0)
    s = np.empty_like(q2)
    _, _, E = _seeds(x[:, 0])
    # m = 0 uses chi*Q_{-1/2} - Q_{1/2} = sqrt(2(chi+1)) E.
    s[:, 0] = 4.0 * E / (x[:, 0] * np.sqrt(chi[:, 0] + 1.0))
    if q2.shape[1] > 1:
        m = np.arange(1, q2.shape[1])
        s[:, 1:] = np.sqrt(8.0) * (1.0 - 2.0 * m) * ((q2[:, 1:] - q2[:, :-1]) + x * q2[:, 1:]) / denom
    return s[0] if single else s


def t_seq(chim1, M_q):
    """``T_m = 2 pi (chi - sqrt(chi^2-1))^m / sqrt(chi^2-1)``, batched on axis 0."""
    x = np.atleast_1d(np.asarray(chim1, dtype=float))[:, None]
    root = np.sqrt(x * (x + 2.0))
    ratio = 1.0 / (1.0 + x + root)
    m = np.arange(M_q + 1)
    return 2.0 * np.pi * ratio ** m / root


def power_seqs(chi, q, chim1=None):
    """``S_m`` and ``T_m`` for the same ``chi`` and length as ``q``."""
    if chim1 is None:
        chim1 = float(chi) - 1.0
    if not chim1 > 0:
        raise DomainError("chi must exceed 1")
    qa = q.q if isinstance(q, HalfOrderSeq) else np.asarray(q, dtype=float)
    s = s_from_q(np.array([chim1]), qa[None, :])[0]
    t = t_seq(np.array([chim1]), qa.size - 1)[0]
    return PowerSeqs(1.0 + chim1, s, t)
