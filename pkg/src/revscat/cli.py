"""Command line front end: ``revscat {solve,verify,converge,ggq-check}``."""
import argparse
import csv
import io
import json
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ggq
from . import quadops as Q
from . import solver as S
from .config import ConfigError, RunConfig, expand_grid
from .geometry import GeometryError, build_mesh, gauss_legendre

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (S.SolveFailure, S.BandwidthFailure, S.ProbeError, np.linalg.LinAlgError,
                  ggq.QuadratureDataError, FloatingPointError)


@dataclass
class ResultRecord:
    k0: float
    k1: float
    N_f: int
    N_pts: int
    T_kernel: float
    T_matgen: float
    T_solve: float
    T_add: float
    E_error: float

    def __post_init__(self):
        if min(self.T_kernel, self.T_matgen, self.T_solve, self.T_add) < 0 or not self.E_error >= 0:
            raise ValueError("timings and errors must be nonnegative")

    def row(self):
        return {"k0": f"{self.k0:g}", "k1": f"{self.k1:g}", "N_f": str(self.N_f), "N_pts": str(self.N_pts),
                "T_kernel": f"{self.T_kernel:.2e}", "T_matgen": f"{self.T_matgen:.2e}",
                "T_solve": f"{self.T_solve:.2e}", "T_add": f"{self.T_add:.2e}", "E_error": f"{self.E_error:.2e}"}


class Outbox:
    """Collect output files in a scratch directory and publish them only on success."""

    def __init__(self, out):
        self.out = Path(out)
        self.tmp = None

    def __enter__(self):
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".revscat-", dir=self.out.parent))
        return self

    def path(self, name):
        return self.tmp / name

    def write_text(self, name, text):
        self.path(name).write_text(text)

    def write_csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.write_text(name, buf.getvalue())

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=1) + "\n")

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.out.mkdir(parents=True, exist_ok=True)
                for f in sorted(self.tmp.iterdir()):
                    f.replace(self.out / f.name)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# problem setup -----------------------------------------------------------------

def make_mesh(cfg, panels=None):
    g = cfg.geometry
    return build_mesh(cfg.curve(), panels or g.panels, p=g.order, refine=g.refine, min_panel=g.min_panel)


def make_incident(cfg, media):
    inc = cfg.incident
    if inc.kind == "plane_wave":
        return S.PlaneWave.from_angles(media, inc.theta1, inc.phi1, inc.theta2, inc.phi2)
    return S.CurrentLoop(tuple(inc.center), inc.radius, media.k0, media.omega, complex(media.mu0))


def _solve(cfg, mesh, media, incident, kind=None):
    return S.solve_scattering(mesh, media, incident, kind or cfg.formulation, tol=cfg.tolerances.decomposition,
                              kernel_tol=cfg.tolerances.kernel)


def far_field_grid(cfg):
    ff = cfg.outputs.far_field
    th, ph = np.meshgrid(expand_grid(ff["theta"]), expand_grid(ff["phi"]), indexing="ij")
    return th.ravel(), ph.ravel()


def _num(v):
    return repr(float(v))


# currents on arbitrary parameter values -------------------------------------------

def arclength_parameters(mesh, n):
    """Parameter values at n equispaced arclength positions (panel-end values excluded)."""
    p = mesh.p
    xg, wg = gauss_legendre(p)
    L = np.cumsum([0.0] + [mesh.w[i * p:(i + 1) * p].sum() for i in range(mesh.n_panels)])
    s = (np.arange(n) + 0.5) * L[-1] / n
    out = np.empty(n)
    coef = np.polynomial.legendre.legfit(xg, mesh.speed.reshape(-1, p).T, p - 1).T
    for j, sj in enumerate(s):
        i = min(int(np.searchsorted(L, sj, side="right")) - 1, mesh.n_panels - 1)
        pn = mesh.panels[i]
        h = 0.5 * (pn.t1 - pn.t0)
        anti = np.polynomial.legendre.legint(coef[i], lbnd=-1) * h
        der = np.polynomial.legendre.legder(anti)
        y = -1 + 2 * (sj - L[i]) / (L[i + 1] - L[i])
        for _ in range(50):
            step = (np.polynomial.legendre.legval(y, anti) - (sj - L[i])) / np.polynomial.legendre.legval(y, der)
            y = float(np.clip(y - step, -1, 1))
            if abs(step) < 1e-15:
                break
        out[j] = pn.t0 + (y + 1) * h
    return s, out


def current_error(sol, ref):
    """Relative surface L2 differences (electric, magnetic) of sol against ref on ref's nodes."""
    mesh = ref.mesh
    got = S.sample_currents(sol, mesh.t)
    n = max(sol.n_f, ref.n_f)
    a = np.zeros((2 * n + 1, 4, mesh.n_points), dtype=complex)
    b = np.zeros_like(a)
    a[n - sol.n_f:n + sol.n_f + 1] = got
    b[n - ref.n_f:n + ref.n_f + 1] = ref.currents
    wr = mesh.w * mesh.r
    out = []
    for rows in (slice(0, 2), slice(2, 4)):
        num = np.sum(np.abs(a[:, rows] - b[:, rows]) ** 2 * wr)
        den = np.sum(np.abs(b[:, rows]) ** 2 * wr)
        out.append(float(np.sqrt(num / den)))
    return out


def far_field_error(f, ref):
    return float(np.linalg.norm(f - ref) / np.linalg.norm(ref))


# commands ------------------------------------------------------------------------

def cmd_solve(cfg, out, seed=0):
    media = cfg.build_media()
    mesh = make_mesh(cfg)
    sol = _solve(cfg, mesh, media, make_incident(cfg, media))
    th, ph = far_field_grid(cfg)
    ff = S.far_field(sol, th, ph)
    ns, nth = cfg.outputs.currents["s"], cfg.outputs.currents["theta"]
    s, t = arclength_parameters(mesh, ns)
    modal = S.sample_currents(sol, t)
    ang = 2 * np.pi * np.arange(nth) / nth
    phys = np.einsum("mqs,ma->qsa", modal, np.exp(1j * np.outer(sol.modes, ang)))
    names = ("J_t", "J_theta", "M_t", "M_theta")
    with Outbox(out) as box:
        box.write_text("config.yaml", cfg.to_text())
        rows = []
        for m in sol.modes:
            cur = sol.mode(m)
            for j in range(mesh.n_points):
                rows.append([m, j, _num(mesh.t[j]), _num(mesh.r[j]), _num(mesh.z[j])]
                            + [_num(f(cur[q, j])) for q in range(4) for f in (np.real, np.imag)])
        box.write_csv("modal_currents.csv", ["m", "node", "t", "r", "z"]
                      + [f"{n}_{c}" for n in names for c in ("re", "im")], rows)
        rows = [[_num(s[i]), _num(ang[a])] + [_num(f(phys[q, i, a])) for q in range(4) for f in (np.real, np.imag)]
                for i in range(ns) for a in range(nth)]
        box.write_csv("currents.csv", ["s", "theta"] + [f"{n}_{c}" for n in names for c in ("re", "im")], rows)
        box.write_csv("far_field.csv", ["theta", "phi", "E_inf"],
                      [[_num(a), _num(b), _num(c)] for a, b, c in zip(th, ph, ff)])
        box.write_json("far_field.json", {"k0": float(np.real(media.k0)), "formulation": sol.kind,
                                          "incident": asdict(cfg.incident), "theta": th.tolist(),
                                          "phi": ph.tolist(), "E_inf": ff.tolist()})
        box.write_json("run.json", _meta(sol, media, mesh, None))
    return sol


def _meta(sol, media, mesh, err):
    rec = ResultRecord(float(np.real(media.k0)), float(np.real(media.k1)), sol.n_f, mesh.n_points,
                       sol.timings.kernel, sol.timings.matgen, sol.timings.solve, sol.timings.add,
                       0.0 if err is None else err)
    return {"record": asdict(rec), "decay_ratio": sol.decay_ratio(),
            "condition": {str(m): c for m, c in sorted(sol.conditions.items())}}


def probe_solution(sol, n, seed, max_levels=4):
    """Probes inside the body, subdividing the evaluation mesh until they fit."""
    for level in range(max_levels + 1):
        ev = S.subdivide(sol, level)
        try:
            return ev, S.probe_points(ev.mesh, n, seed)
        except S.ProbeError:
            if level == max_levels:
                raise


def cmd_verify(cfg, out, seed=0):
    media = cfg.build_media()
    mesh = make_mesh(cfg)
    loop = S.extinction_loop(media, tuple(cfg.incident.center), cfg.incident.radius)
    sol = _solve(cfg, mesh, media, loop, kind="indirect")
    ev, probes = probe_solution(sol, cfg.outputs.probes, seed)
    err = S.extinction_error(ev, probes, loop)
    t = sol.timings
    rec = ResultRecord(float(np.real(media.k0)), float(np.real(media.k1)), sol.n_f, mesh.n_points,
                       t.kernel, t.matgen, t.solve, t.add, err)
    with Outbox(out) as box:
        box.write_text("config.yaml", cfg.to_text())
        row = rec.row()
        if cfg.outputs.table_format == "csv":
            box.write_csv("verify.csv", list(row), [list(row.values())])
        else:
            box.write_json("verify.json", row)
        box.write_json("run.json", _meta(sol, media, mesh, err)
                       | {"probes": probes.tolist(), "seed": seed})
    return rec


def cmd_converge(cfg, out, seed=0):
    sw = cfg.sweep
    if not sw.panels or sw.reference is None:
        raise ConfigError("converge needs sweep.panels and sweep.reference")
    media = cfg.build_media()
    incident = make_incident(cfg, media)
    th, ph = far_field_grid(cfg)

    def run(n):
        return _solve(cfg, make_mesh(cfg, n), media, incident)

    ref = run(sw.reference)
    rows = []
    if sw.quantity == "far_field":
        fref = S.far_field(ref, th, ph)
        header = ["panels", "N_pts", "N_f", "far_field_error"]
        for n in sw.panels:
            sol = ref if n == sw.reference else run(n)
            rows.append([n, sol.mesh.n_points, sol.n_f, _num(far_field_error(S.far_field(sol, th, ph), fref))])
    else:
        header = ["panels", "N_pts", "N_f", "electric_error", "magnetic_error"]
        for n in sw.panels:
            sol = ref if n == sw.reference else run(n)
            rows.append([n, sol.mesh.n_points, sol.n_f, *map(_num, current_error(sol, ref))])
    with Outbox(out) as box:
        box.write_text("config.yaml", cfg.to_text())
        box.write_csv("converge.csv", header, rows)
    return rows


def cmd_ggq_check(cfg, out, seed=0):
    p = cfg.geometry.order
    rules = ggq.load_rules(p)
    x = gauss_legendre(p)[0]
    rows, worst = [], 0.0
    for key in sorted(rules.rules, key=lambda k: (k[0], k[1:])):
        xr, wr = rules.rules[key]
        if key[0] == "self":
            fam = ggq.Family(rules.degree, [x[key[1]]])
        elif key[0] == "axis":
            n = key[2]
            fam = ggq.Family(rules.degree, [x[n], ggq.mirror_point(p, n, float(key[1]))])
        elif key[0] == "adjacent":
            fam = ggq.Family(rules.degree, ggq.neighbor_points(p))
        else:
            fam = ggq.Family(rules.degree, ggq.neighbor_points(p) + ggq.neighbor_points(p, turn=float(key[1])))
        err = ggq.check_exactness(xr, wr, fam)
        worst = max(worst, err)
        rows.append([" ".join(map(str, key)), len(xr), f"{err:.3e}"])
    for n in range(p):
        xr, wr = rules.self_rule(n)
        xn = x[n]
        ref = (1 - xn) * np.log(1 - xn) + (1 + xn) * np.log(1 + xn) - 2
        err = abs(wr @ np.log(np.abs(xr - xn)) - ref)
        worst = max(worst, err)
        rows.append([f"log_moment {n}", len(xr), f"{err:.3e}"])
    with Outbox(out) as box:
        box.write_csv("ggq_check.csv", ["rule", "nodes", "error"], rows)
    if worst > 1e-13:
        raise ggq.QuadratureDataError(f"quadrature rules are inexact: worst error {worst:.3e}")
    return worst


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "converge": cmd_converge, "ggq-check": cmd_ggq_check}


def _parser():
    ap = argparse.ArgumentParser(prog="revscat", description="Scattering by penetrable bodies of revolution.")
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    ap.add_argument("--out", default="revscat-out", help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="seed for probe placement")
    return ap


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be positive")
    from threadpoolctl import threadpool_limits
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    return threadpool_limits(limits=n)


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        limiter = _limit_threads(args.threads)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    try:
        result = COMMANDS[args.command](cfg, args.out, args.seed)
    except (ConfigError, GeometryError, Q.MediaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    if isinstance(result, ResultRecord):
        row = result.row()
        print("  ".join(f"{k:>9}" for k in row))
        print("  ".join(f"{v:>9}" for v in row.values()))
    elif args.command == "converge":
        for r in result:
            print("  ".join(map(str, r)))
    print(f"wrote {args.out} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
