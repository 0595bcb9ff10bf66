import json
from pathlib import Path

import numpy as np
import pytest

from revscat import _accel
from revscat import modalgreen as mg
from revscat import specfun as sf

DATA = json.loads((Path(__file__).parent / "data" / "modalgreen_oracle.json").read_text())
ROWS = [0, 2, 3, 6, 7, 8]
TOLS = [1e-10, 1e-9, 1e-9, 1e-8, 1e-8, 1e-8]


def _ref(rec):
    return np.array([[complex(*v) for v in row] for row in rec["values"]])


def _relerr(got, ref):
    return np.abs(got - ref).max(axis=-1) / np.abs(ref).max(axis=-1)


def _batch(records):
    out = []
    for k0 in sorted({r["k0"] for r in records}):
        sel = [r for r in records if r["k0"] == k0]
        pairs = np.array([r["pair"] for r in sel])
        vals = mg.modal_kernels(*pairs.T, k0, 0.5 * k0, DATA["M"])
        for i, r in enumerate(sel):
            out.append((r, vals[ROWS, i, :DATA["M"] + 1]))
    return out


def test_random_pairs_match_brute_force():
    worst = np.zeros(6)
    for rec, got in _batch(DATA["records"]):
        worst = np.maximum(worst, _relerr(got, _ref(rec)))
    assert np.all(worst <= TOLS), worst


def test_numpy_fallback_matches_brute_force(monkeypatch):
    monkeypatch.setattr(_accel, "HAVE_NUMBA", False)
    worst = np.zeros(6)
    for rec, got in _batch(DATA["records"][::7]):
        worst = np.maximum(worst, _relerr(got, _ref(rec)))
    assert np.all(worst <= TOLS), worst


def _fixed(k0):
    return next(r for r in DATA["records"] if r["pair"] == [1.1, 0.2, 1.0, 0.0] and r["k0"] == k0)


def test_reference_pair_values():
    pair = mg.PairGeometry(1.1, 0.2, 1.0, 0.0)
    rec = _fixed(5.0)
    g1 = mg.eval_g1(pair, 5.0, 20)
    ref = _ref(rec)[0, :21]
    assert _relerr(g1[21:42], ref) < 1e-10

    rec = _fixed(10.0)
    dr, dz = mg.eval_dg1(pair, 10.0, 20)
    assert _relerr(dr[20:], _ref(rec)[1, :21]) < 1e-9
    assert _relerr(dz[20:], _ref(rec)[2, :21]) < 1e-9
    rr, rz, zz = mg.eval_d2g1_diff(pair, 10.0, 5.0, 10)
    for got, row in ((rr, 3), (rz, 4), (zz, 5)):
        assert _relerr(got[10:], _ref(rec)[row, :11]) < 1e-8


@pytest.mark.parametrize("pair", [(1.1, 0.2, 1.0, 0.0), (1.0, 0.003, 1.0, 0.0), (0.3, -0.5, 2.0, 0.4)])
def test_static_limit_is_legendre(pair):
    g1 = mg.eval_g1(mg.PairGeometry(*pair), 0.0, 30)
    p = mg.PairGeometry(*pair)
    q = sf.legendre_q_batch(np.array([p.chim1]), 31)[0]
    qhat = q / (2 * np.pi * np.sqrt(p.r_t * p.r_s))
    assert _relerr(g1[31:], qhat) < 1e-12


def test_g1_even_and_relations():
    pair = mg.PairGeometry(1.3, 0.1, 1.0, -0.2)
    blk = mg.kernel_block(pair, 7.0, 3.0, 12)
    assert np.allclose(blk.g1, blk.g1[::-1], rtol=0, atol=0)
    assert np.allclose(blk.g2, blk.g2[::-1], rtol=0, atol=0)
    assert np.allclose(blk.g3, -blk.g3[::-1], rtol=0, atol=0)
    assert blk.g3[12] == 0
    g1 = mg.eval_g1(pair, 7.0, 12)
    assert np.allclose(blk.g2, 0.5 * (g1[2:] + g1[:-2]), rtol=1e-15)
    assert np.allclose(blk.g3, (g1[2:] - g1[:-2]) / 2j, rtol=1e-15)


def test_derive_g23_algebra():
    g2, g3 = mg.derive_g23(np.full(9, 2.0 + 1j))
    assert np.all(g3 == 0) and np.all(g2 == 2.0 + 1j)
    rng = np.random.default_rng(3)
    half = rng.normal(size=6) + 1j * rng.normal(size=6)
    g1 = np.concatenate([half[:0:-1], half])
    g2, g3 = mg.derive_g23(g1)
    assert np.array_equal(g2, g2[::-1]) and np.array_equal(g3, -g3[::-1])


def test_static_g2_definition():
    pair = mg.PairGeometry(1.2, 0.3, 0.9, 0.0)
    g1 = mg.eval_g1(pair, 0.0, 8)
    g2, _ = mg.derive_g23(g1)
    assert np.array_equal(g2, 0.5 * (g1[2:] + g1[:-2]))


@pytest.mark.parametrize("chim1", [0.05, 0.2, 0.6, 1.5])
def test_near_and_far_paths_agree(chim1):
    rs, rt = 1.0, 1.0 + np.sqrt(2 * chim1) * 0.3
    dz = np.sqrt(2 * rt * rs * chim1 - (rt - rs) ** 2)
    a = [np.array([v]) for v in (rt, dz, rs, 0.0)]
    near = mg.modal_kernels(*a, 10.0, 5.0, 40, path="near")[:, 0]
    far = mg.modal_kernels(*a, 10.0, 5.0, 40, path="far")[:, 0]
    assert np.all(_relerr(near, far) < 1e-11)


def _richardson(fun, x, h):
    d1 = (fun(x + h) - fun(x - h)) / (2 * h)
    d2 = (fun(x + h / 2) - fun(x - h / 2)) / h
    return (4 * d2 - d1) / 3


@pytest.mark.parametrize("k", [0.0, 3.0, 10.0])
@pytest.mark.parametrize("pair", [(1.1, 0.2, 1.0, 0.0), (0.8, 0.05, 0.95, -0.1)])
def test_derivatives_match_finite_differences(k, pair):
    rt, zt, rs, zs = pair
    assert mg.PairGeometry(*pair).chi > 1.01
    M = 15
    dr, dz = mg.eval_dg1(mg.PairGeometry(*pair), k, M)
    g_r = lambda x: mg.eval_g1(mg.PairGeometry(x, zt, rs, zs), k, M)[1:-1]
    g_z = lambda x: mg.eval_g1(mg.PairGeometry(rt, x, rs, zs), k, M)[1:-1]
    assert _relerr(dr, _richardson(g_r, rt, 1e-5)) < 1e-7
    assert _relerr(dz, _richardson(g_z, zt, 1e-5)) < 1e-7


def test_second_derivative_difference_matches_finite_differences():
    rt, zt, rs, zs = 1.1, 0.2, 1.0, 0.0
    M = 10
    rr, rz, zz = mg.eval_d2g1_diff(mg.PairGeometry(rt, zt, rs, zs), 6.0, 2.0, M)

    def first(x, z, which):
        p = mg.PairGeometry(x, z, rs, zs)
        a = mg.eval_dg1(p, 6.0, M)[which]
        b = mg.eval_dg1(p, 2.0, M)[which]
        return a - b

    assert _relerr(rr, _richardson(lambda x: first(x, zt, 0), rt, 1e-4)) < 1e-6
    assert _relerr(rz, _richardson(lambda z: first(rt, z, 0), zt, 1e-4)) < 1e-6
    assert _relerr(zz, _richardson(lambda z: first(rt, z, 1), zt, 1e-4)) < 1e-6


def test_dz_is_odd_in_height():
    up = mg.eval_dg1(mg.PairGeometry(1.0, 0.1, 1.2, 0.0), 4.0, 10)[1]
    down = mg.eval_dg1(mg.PairGeometry(1.0, -0.1, 1.2, 0.0), 4.0, 10)[1]
    assert np.allclose(up, -down, rtol=1e-13, atol=0)


def test_equal_wavenumbers_give_zero_differences():
    out = mg.eval_d2g1_diff(mg.PairGeometry(1.0, 0.01, 1.0, 0.0), 5.0, 5.0, 8)
    for arr in out:
        assert np.all(arr == 0)
    data = mg.modal_kernels(np.array([1.0]), np.array([0.01]), np.array([1.0]), np.array([0.0]), 5.0, 5.0, 8)
    assert np.all(data[4:] == 0)


def test_second_difference_even():
    rr, rz, zz = mg.eval_d2g1_diff(mg.PairGeometry(1.4, -0.3, 1.0, 0.2), 10.0, 5.0, 6)
    for arr in (rr, rz, zz):
        assert np.array_equal(arr, arr[::-1])


def test_nearly_touching_rings():
    # chi - 1 ~ 5e-9: compare the split route with the Legendre limit at k = 0
    pair = mg.PairGeometry(1.0, 1e-4, 1.0, 0.0)
    g1 = mg.eval_g1(pair, 0.0, 40)
    q = sf.legendre_q_batch(np.array([pair.chim1]), 41)[0] / (2 * np.pi)
    assert np.allclose(g1[41:], q, rtol=1e-12, atol=0)


def test_invalid_pairs():
    with pytest.raises(ValueError):
        mg.PairGeometry(0.0, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        mg.PairGeometry(1.0, 0.5, 1.0, 0.5)
    with pytest.raises(mg.BandwidthError):
        mg.eval_g1(mg.PairGeometry(1.0, 1e-6, 1.0, 0.0), 1.0, 4, path="far")
