import numpy as np
import pytest
from scipy import integrate

from revscat import quadops as Q
from revscat import solver as S
from revscat.geometry import build_mesh, make_curve


class Scaled:
    def __init__(self, field, alpha):
        self.field, self.alpha, self.k0 = field, alpha, field.k0

    def fields(self, x):
        E, H = self.field.fields(x)
        return self.alpha * E, self.alpha * H


class Uniform:
    k0 = 1.0

    def fields(self, x):
        x = np.atleast_2d(x)
        E = np.zeros((len(x), 3), dtype=complex)
        E[:, 2] = 1.0
        return E, np.zeros_like(E)


@pytest.fixture(scope="module")
def small():
    mesh = build_mesh(make_curve("torus"), 4)
    med = Q.Media.from_wavenumbers(1.0, 0.5)
    pw = S.PlaneWave.from_angles(med)
    return mesh, med, pw, S.solve_scattering(mesh, med, pw, "indirect")


@pytest.fixture(scope="module")
def torus_loop():
    mesh = build_mesh(make_curve("torus"), 20)
    med = Q.Media.from_wavenumbers(10.0, 5.0)
    loop = S.extinction_loop(med)
    return mesh, med, loop, S.solve_scattering(mesh, med, loop, "indirect")


def _curl(F, x, h=1e-4):
    out = np.zeros(3, dtype=complex)
    d = np.eye(3) * h
    J = np.array([(F(x + d[j]) - F(x - d[j])) / (2 * h) for j in range(3)])  # J[j, i] = dF_i/dx_j
    out[0] = J[1, 2] - J[2, 1]
    out[1] = J[2, 0] - J[0, 2]
    out[2] = J[0, 1] - J[1, 0]
    return out


# incident fields -------------------------------------------------------------------

def test_plane_wave_is_transverse_and_unit():
    med = Q.Media.from_wavenumbers(3.0, 1.0)
    pw = S.PlaneWave.from_angles(med)
    assert np.linalg.norm(pw.d) == pytest.approx(1.0)
    assert np.linalg.norm(np.cross(pw.d, pw.e)) == pytest.approx(1.0)
    assert abs(pw.d @ pw.e) < 1e-15 and abs(pw.d @ pw.h) < 1e-15


@pytest.mark.parametrize("omega", [1.0, 2.5])
def test_plane_wave_satisfies_maxwell(omega):
    med = Q.Media.from_wavenumbers(3.0, 1.0, omega)
    pw = S.PlaneWave.from_angles(med)
    rng = np.random.default_rng(1)
    for x in rng.uniform(-2, 2, (5, 3)):
        E, H = (lambda y: pw.fields(y)[0][0]), (lambda y: pw.fields(y)[1][0])
        iwmu, iweps = 1j * omega * complex(med.mu0), 1j * omega * complex(med.eps0)
        assert np.abs(_curl(E, x) - iwmu * H(x)).max() < 1e-6 * np.abs(iwmu * H(x)).max()
        assert np.abs(_curl(H, x) + iweps * E(x)).max() < 1e-6 * np.abs(iweps * E(x)).max()


def test_loop_satisfies_maxwell():
    med = Q.Media.from_wavenumbers(10.0, 5.0)
    loop = S.extinction_loop(med)
    x = np.array([0.3, -0.2, 0.4])
    E, H = (lambda y: loop.fields(y)[0][0]), (lambda y: loop.fields(y)[1][0])
    iw = 1j * med.omega
    iwmu, iweps = iw * complex(med.mu1), iw * complex(med.eps1)
    assert np.abs(_curl(E, x) - iwmu * H(x)).max() < 1e-6 * np.abs(iwmu * H(x)).max()
    assert np.abs(_curl(H, x) + iweps * E(x)).max() < 1e-6 * np.abs(iweps * E(x)).max()


def _loop_by_quadrature(x, center, radius, k, omega, mu):
    """E = int grad G x dl and H = (k^2 A + grad div A) / (i w mu) by adaptive quadrature."""
    c = np.asarray(center)

    def integrand(a):
        y = c + radius * np.array([np.cos(a), np.sin(a), 0.0])
        dl = radius * np.array([-np.sin(a), np.cos(a), 0.0])
        R = x - y
        d = np.linalg.norm(R)
        G = np.exp(1j * k * d) / (4 * np.pi * d)
        g1 = G * (1j * k - 1 / d) / d              # grad G = g1 R
        g2 = G * ((1j * k - 1 / d) ** 2 + 1 / d ** 2 - (1j * k - 1 / d) / d) / d ** 2
        hess = g1 * np.eye(3) + g2 * np.outer(R, R)
        E = np.cross(g1 * R, dl)
        H = (k ** 2 * G * dl + hess @ dl) / (1j * omega * mu)
        return np.concatenate([E, H])

    val = integrate.quad_vec(integrand, 0, 2 * np.pi, epsabs=1e-15, epsrel=1e-13)[0]
    return val[:3], val[3:]


def test_loop_matches_adaptive_quadrature():
    med = Q.Media.from_wavenumbers(10.0, 5.0)
    loop = S.extinction_loop(med)
    rng = np.random.default_rng(2)
    for x in rng.uniform(-1, 1, (4, 3)):
        E, H = loop.fields(x)
        Er, Hr = _loop_by_quadrature(x, loop.center, loop.radius, loop.k, med.omega, complex(med.mu1))
        assert np.abs(E[0] - Er).max() < 1e-11 * np.abs(Er).max()
        assert np.abs(H[0] - Hr).max() < 1e-11 * np.abs(Hr).max()


# modal decomposition -----------------------------------------------------------

def test_axial_plane_wave_has_only_modes_one():
    mesh = build_mesh(make_curve("torus"), 4)
    med = Q.Media.from_wavenumbers(4.0, 2.0)
    pw = S.PlaneWave.for_media(med, [0, 0, 1], [1, 0, 0])
    coef, n_f = S.decompose_incident(pw, mesh, tol=1e-14)
    assert n_f == 1
    top = np.abs(coef).max()
    assert np.abs(coef[1]).max() <= 1e-14 * top


def test_uniform_field_is_axisymmetric():
    mesh = build_mesh(make_curve("starfish"), 5)
    coef, n_f = S.decompose_incident(Uniform(), mesh)
    assert n_f == 0 and np.abs(coef[0, :2]).max() > 0.1


def test_default_plane_wave_bandwidth_torus():
    # Jacobi-Anger: on a ring of radius r the wave carries J_m(k0 r sin(polar)),
    # and the frame components shift m by one
    from scipy.special import jv

    mesh = build_mesh(make_curve("torus"), 20)
    med = Q.Media.from_wavenumbers(10.0, 5.0)
    pw = S.PlaneWave.from_angles(med)
    _, n_f = S.decompose_incident(pw, mesh)
    arg = 10.0 * mesh.r * np.hypot(pw.d[0], pw.d[1])
    m = np.arange(120)
    amp = np.abs(jv(m[:, None], arg[None, :])).max(axis=1)
    predicted = int(np.nonzero(amp > 1e-12 * amp.max())[0].max()) + 1
    assert abs(n_f - predicted) <= 2


def test_nonpositive_tolerance_rejected():
    mesh = build_mesh(make_curve("torus"), 4)
    with pytest.raises(ValueError):
        S.decompose_incident(Uniform(), mesh, tol=0.0)


# solves ------------------------------------------------------------------------------

def test_equal_media_give_traces_of_incident_field():
    mesh = build_mesh(make_curve("torus"), 4)
    med = Q.Media.from_wavenumbers(2.0, 2.0)
    pw = S.PlaneWave.from_angles(med)
    sol = S.solve_scattering(mesh, med, pw, "direct")
    coef, n_f = S.decompose_incident(pw, mesh)
    assert n_f == sol.n_f
    co = Q.formulation_coefficients("direct", med)
    expect_M = co["rhs_E"] * coef[:, :2] / co["EM_id"]
    expect_J = co["rhs_H"] * coef[:, 2:] / co["HJ_id"]
    scale = np.abs(sol.currents).max()
    assert np.abs(sol.currents[:, 2:] - expect_M).max() < 1e-13 * scale
    assert np.abs(sol.currents[:, :2] - expect_J).max() < 1e-13 * scale
    # the direct unknowns are then n x H and n x E themselves
    assert np.abs(sol.currents[:, 2:] - coef[:, :2]).max() < 1e-13 * scale


def test_linearity(small):
    mesh, med, pw, sol = small
    alpha = 2.5 - 1.25j
    other = S.solve_scattering(mesh, med, Scaled(pw, alpha), "indirect")
    assert np.abs(other.currents - alpha * sol.currents).max() <= 1e-13 * np.abs(other.currents).max()


def test_mode_grouping_does_not_change_currents(small):
    mesh, med, pw, sol = small
    one = S.solve_scattering(mesh, med, pw, "indirect", mode_memory=1.0)
    assert np.abs(one.currents - sol.currents).max() <= 1e-13 * np.abs(sol.currents).max()


def test_timings_and_conditions_recorded(small):
    sol = small[3]
    t = sol.timings
    assert min(t.kernel, t.matgen, t.solve, t.add) >= 0
    assert set(sol.conditions) == set(range(sol.n_f + 1))


def test_guard_modes_do_not_change_far_field(small):
    mesh, med, pw, sol = small
    finer = S.solve_scattering(mesh, med, pw, "indirect", tol=1e-15)
    assert finer.n_f > sol.n_f
    th = np.linspace(0, 2 * np.pi, 9)
    a, b = S.far_field(sol, th, 1.0), S.far_field(finer, th, 1.0)
    assert np.abs(a - b).max() < 1e-10 * np.abs(b).max()


# post-processing -------------------------------------------------------------------

def test_zero_currents_give_zero_fields(small):
    mesh, med, pw, sol = small
    zero = S.ScatterSolution(mesh, med, "indirect", 2, np.zeros((5, 4, mesh.n_points), dtype=complex))
    assert np.all(S.far_field(zero, np.linspace(0, 6, 5), 0.7) == 0)
    # the 4-panel mesh leaves no room inside for probes, so split its panels first
    fine = S.subdivide(zero, 2)
    for region, x in (("exterior", [[0.0, 5.0, 1.0]]), ("interior", [[0.0, 2.0, 0.0]])):
        E, H = S.eval_fields(fine, x, region)
        assert np.all(E == 0) and np.all(H == 0)


def test_far_field_is_nonnegative(small):
    ff = small[3]
    vals = S.far_field(ff, np.linspace(0, 2 * np.pi, 13)[:, None], np.linspace(0.1, 3.0, 5)[None, :])
    assert vals.shape == (13, 5) and np.all(vals >= 0)


def test_evaluation_points_are_checked(small):
    sol = small[3]
    with pytest.raises(S.ProbeError, match="axis"):
        S.eval_fields(sol, [[0.0, 0.0, 1.0]])
    with pytest.raises(S.ProbeError, match="panel length"):
        S.eval_fields(sol, [[3.05, 0.0, 0.0]])
    with pytest.raises(S.ProbeError):
        S.extinction_error(sol, np.zeros((0, 3)), Uniform())


def test_surface_divergence_of_known_density():
    mesh = build_mesh(make_curve("torus"), 10)
    t, m = mesh.t, 3
    J1, J2 = np.cos(2 * t), np.sin(t)
    r, speed = 2 + np.cos(t), np.hypot(np.sin(t), 0.5 * np.cos(t))
    d_rJ1 = -np.sin(t) * np.cos(2 * t) - 2 * r * np.sin(2 * t)
    exact = (d_rJ1 / speed + 1j * m * J2) / r
    assert np.abs(S.surface_divergence(mesh, J1, J2, m) - exact).max() < 1e-9


def test_subdivided_solution_keeps_far_field(small):
    sol = small[3]
    fine = S.subdivide(sol, 2)
    assert fine.mesh.n_panels == 4 * sol.mesh.n_panels
    th = np.linspace(0, 2 * np.pi, 7)
    a, b = S.far_field(sol, th, 1.2), S.far_field(fine, th, 1.2)
    assert np.abs(a - b).max() < 1e-12 * np.abs(a).max()


def test_probe_points_are_inside_and_deterministic():
    mesh = build_mesh(make_curve("starfish"), 19)
    a = S.probe_points(mesh, 10, seed=4)
    b = S.probe_points(mesh, 10, seed=4)
    assert np.array_equal(a, b) and a.shape == (10, 3)
    r = np.hypot(a[:, 0], a[:, 1])
    assert np.all(np.hypot(r, a[:, 2]) < 2.5)


def test_torus_extinction(torus_loop):
    mesh, med, loop, sol = torus_loop
    assert sol.n_f <= 20 and mesh.n_points == 320
    err = S.extinction_error(sol, S.probe_points(mesh), loop)
    assert err <= 5e-9


def test_injected_exact_field_gives_zero_error(torus_loop, monkeypatch):
    mesh, med, loop, sol = torus_loop
    probes = S.probe_points(mesh)
    monkeypatch.setattr(S, "eval_fields", lambda s, p, region: loop.fields(p))
    assert S.extinction_error(sol, probes, loop) == 0.0


def test_scattered_field_vanishes_outside_in_extinction_setup(torus_loop):
    mesh, med, loop, sol = torus_loop
    pts = np.array([[0.0, 4.0, 1.0], [3.0, -3.0, -2.0], [0.5, 0.5, 3.0]])
    E, _ = S.eval_fields(sol, pts, "exterior")
    Einc, _ = loop.fields(pts)
    assert np.abs(E).max() < 1e-8 * np.abs(Einc).max()
    assert S.far_field(sol, np.linspace(0, 6, 5), 1.0).max() < 1e-8 * np.abs(Einc).max()


def test_modal_coefficients_decay(torus_loop):
    assert torus_loop[3].decay_ratio() <= 1e-10
