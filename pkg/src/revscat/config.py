"""Run configuration: a YAML file with one section per concern.

Schema (every key optional except ``geometry.kind``)::

    geometry:
      kind: torus            # torus | starfish | droplet | cylinder | custom
      params: {}             # keyword arguments of the curve; custom takes
                             # r, z (expressions in t), t_a, t_b, corners, closed
      panels: 20             # base panel count
      refine: 0              # dyadic refinement levels at corners and tips
      min_panel: null        # refine until touching panels are at most this long
      order: 16
    media:
      k0: 10.0               # either k0, k1 (nonmagnetic, eps = (k/omega)^2)
      k1: 5.0
      omega: 1.0
      # eps0, mu0, eps1, mu1 # or explicit constants; complex values as "2+0.1j"
    incident:
      kind: plane_wave       # plane_wave | current_loop
      theta1: 1.0471975511965976   # propagation azimuth
      phi1: 2.0943951023931953     # propagation polar angle
      theta2: 1.5707963267948966   # polarization azimuth
      phi2: 1.0471975511965976     # polarization polar angle
      center: [0.4, 0.5, 5.0]      # current_loop only
      radius: 0.42
    formulation: indirect    # indirect | direct
    tolerances:
      kernel: 1.0e-12
      decomposition: 1.0e-12
    outputs:
      far_field: {theta: [0.0, 6.283185307179586, 181], phi: [1.5707963267948966]}
      currents: {s: 64, theta: 32}
      probes: 10
      table_format: csv      # csv | json
    sweep:
      panels: [4, 6, 8]
      reference: 20
      quantity: far_field    # far_field | currents

Grids given as a three-element list ``[start, stop, count]`` are expanded
with ``numpy.linspace``; any other list is taken literally.
"""
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import quadops as Q
from .geometry import GeometryError, make_curve

CURVES = ("torus", "starfish", "droplet", "cylinder", "custom")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class GeometrySpec:
    kind: str = "torus"
    params: dict = field(default_factory=dict)
    panels: int = 20
    refine: int = 0
    min_panel: float = None
    order: int = 16


@dataclass
class MediaSpec:
    k0: float = 10.0
    k1: float = 5.0
    omega: float = 1.0
    eps0: object = None
    mu0: object = None
    eps1: object = None
    mu1: object = None


@dataclass
class IncidentSpec:
    kind: str = "plane_wave"
    theta1: float = np.pi / 3
    phi1: float = 2 * np.pi / 3
    theta2: float = np.pi / 2
    phi2: float = np.pi / 3
    center: list = field(default_factory=lambda: [0.4, 0.5, 5.0])
    radius: float = 0.42


@dataclass
class Tolerances:
    kernel: float = 1e-12
    decomposition: float = 1e-12


@dataclass
class Outputs:
    far_field: dict = field(default_factory=lambda: {"theta": [0.0, 2 * np.pi, 181], "phi": [np.pi / 2]})
    currents: dict = field(default_factory=lambda: {"s": 64, "theta": 32})
    probes: int = 10
    table_format: str = "csv"


@dataclass
class Sweep:
    panels: list = field(default_factory=list)
    reference: int = None
    quantity: str = "far_field"


SECTIONS = {"geometry": GeometrySpec, "media": MediaSpec, "incident": IncidentSpec,
            "tolerances": Tolerances, "outputs": Outputs, "sweep": Sweep}


@dataclass
class RunConfig:
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    media: MediaSpec = field(default_factory=MediaSpec)
    incident: IncidentSpec = field(default_factory=IncidentSpec)
    formulation: str = "indirect"
    tolerances: Tolerances = field(default_factory=Tolerances)
    outputs: Outputs = field(default_factory=Outputs)
    sweep: Sweep = field(default_factory=Sweep)

    # serialization ---------------------------------------------------------

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_text(cls, text):
        try:
            root = yaml.compose(text, Loader=yaml.SafeLoader)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"not valid YAML: {getattr(exc, 'problem', exc)}",
                              mark.line + 1 if mark else None) from None
        lines = {}
        if root is not None:
            _record_lines(root, (), lines)
        return cls.from_dict(data or {}, lines)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    @classmethod
    def from_dict(cls, data, lines=None):
        lines = lines or {}
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", 1)
        cfg = cls()
        for key, value in data.items():
            where = lines.get((key,))
            if key == "formulation":
                cfg.formulation = value
            elif key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping", where)
                setattr(cfg, key, _section(SECTIONS[key], value, key, lines))
            else:
                raise ConfigError(f"unknown section {key!r}", where)
        cfg.validate(lines)
        return cfg

    # checks ------------------------------------------------------------------

    def validate(self, lines=None):
        lines = lines or {}

        def fail(msg, *path):
            raise ConfigError(msg, lines.get(path) or lines.get(path[:1]))

        g = self.geometry
        if g.kind not in CURVES:
            fail(f"geometry.kind must be one of {', '.join(CURVES)}", "geometry", "kind")
        for name in ("panels", "refine", "order"):
            v = getattr(g, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name == "refine" else 1):
                fail(f"geometry.{name} must be a {'nonnegative' if name == 'refine' else 'positive'} integer",
                     "geometry", name)
        if g.min_panel is not None and not (_is_real(g.min_panel) and g.min_panel > 0):
            fail("geometry.min_panel must be a positive number", "geometry", "min_panel")
        try:
            self.curve()
        except (GeometryError, TypeError, ValueError) as exc:
            fail(f"geometry: {exc}", "geometry", "params")

        try:
            self.build_media()
        except (Q.MediaError, TypeError, ValueError) as exc:
            fail(f"media: {exc}", "media")

        inc = self.incident
        if inc.kind not in ("plane_wave", "current_loop"):
            fail("incident.kind must be plane_wave or current_loop", "incident", "kind")
        for name in ("theta1", "phi1", "theta2", "phi2", "radius"):
            if not _is_real(getattr(inc, name)):
                fail(f"incident.{name} must be a number", "incident", name)
        if not (isinstance(inc.center, list) and len(inc.center) == 3 and all(map(_is_real, inc.center))):
            fail("incident.center must be three numbers", "incident", "center")
        if not inc.radius > 0:
            fail("incident.radius must be positive", "incident", "radius")

        if self.formulation not in ("indirect", "direct"):
            fail("formulation must be indirect or direct", "formulation")
        for name in ("kernel", "decomposition"):
            v = getattr(self.tolerances, name)
            if not (_is_real(v) and 0 < v < 1):
                fail(f"tolerances.{name} must lie in (0, 1)", "tolerances", name)

        out = self.outputs
        for grid in ("theta", "phi"):
            if not isinstance(out.far_field, dict) or grid not in out.far_field:
                fail(f"outputs.far_field needs a {grid} grid", "outputs", "far_field")
            try:
                expand_grid(out.far_field[grid])
            except ValueError as exc:
                fail(f"outputs.far_field.{grid}: {exc}", "outputs", "far_field", grid)
        cur = out.currents
        if not (isinstance(cur, dict) and set(cur) == {"s", "theta"}
                and all(isinstance(v, int) and v > 0 for v in cur.values())):
            fail("outputs.currents needs positive integers s and theta", "outputs", "currents")
        if not (isinstance(out.probes, int) and out.probes > 0):
            fail("outputs.probes must be a positive integer", "outputs", "probes")
        if out.table_format not in ("csv", "json"):
            fail("outputs.table_format must be csv or json", "outputs", "table_format")

        sw = self.sweep
        if sw.quantity not in ("far_field", "currents"):
            fail("sweep.quantity must be far_field or currents", "sweep", "quantity")
        if sw.panels:
            if not all(isinstance(v, int) and v > 0 for v in sw.panels):
                fail("sweep.panels must be positive integers", "sweep", "panels")
            if list(sw.panels) != sorted(set(sw.panels)):
                fail("sweep.panels must be strictly ascending", "sweep", "panels")
            if not isinstance(sw.reference, int) or sw.reference < sw.panels[-1]:
                fail("sweep.reference must be an integer no smaller than the sweep", "sweep", "reference")

    # builders ----------------------------------------------------------------

    def curve(self):
        g = self.geometry
        if g.kind != "custom":
            return make_curve(g.kind, **g.params)
        return make_curve("custom", **_custom_params(g.params))

    def build_media(self):
        m = self.media
        explicit = [m.eps0, m.mu0, m.eps1, m.mu1]
        if m.k0 is not None or m.k1 is not None:
            if any(v is not None for v in explicit):
                raise ValueError("give either k0, k1 or eps0, mu0, eps1, mu1, not both")
            if m.k0 is None or m.k1 is None:
                raise ValueError("both k0 and k1 are needed")
            return Q.Media.from_wavenumbers(float(m.k0), float(m.k1), float(m.omega))
        if any(v is None for v in explicit):
            raise ValueError("media needs k0, k1 or all of eps0, mu0, eps1, mu1")
        return Q.Media(*(complex(v) for v in explicit), float(m.omega))


def expand_grid(spec):
    if _is_real(spec):
        return np.array([float(spec)])
    if not isinstance(spec, list) or not spec or not all(map(_is_real, spec)):
        raise ValueError("expected a number or a list of numbers")
    if len(spec) == 3 and isinstance(spec[2], int) and not isinstance(spec[2], bool) and spec[2] > 3:
        return np.linspace(float(spec[0]), float(spec[1]), spec[2])
    return np.array(spec, dtype=float)


def _is_real(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _section(cls, data, name, lines):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}", lines.get((name, key)))
    if cls is MediaSpec:
        # a media section replaces the default wavenumbers as a whole
        data = {"k0": None, "k1": None, **data}
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}", lines.get((name,))) from None


def _record_lines(node, path, out):
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _record_lines(v, key, out)


def _custom_params(params):
    """Turn expression strings for r(t), z(t) into callables with exact derivatives."""
    import sympy as sp

    params = dict(params)
    t = sp.Symbol("t", real=True)
    funcs = {}
    for name in ("r", "z"):
        if name not in params:
            raise GeometryError(f"custom curve is missing {name!r}")
        expr = sp.sympify(params.pop(name), locals={"t": t})
        if expr.free_symbols - {t}:
            raise GeometryError(f"{name}(t) may only depend on t")
        funcs[name] = _vectorized(sp.lambdify(t, expr, "numpy"))
        funcs["d" + name] = _vectorized(sp.lambdify(t, sp.diff(expr, t), "numpy"))
    params.update(funcs)
    params["corners"] = tuple(params.get("corners", ()))
    return params


def _vectorized(f):
    def g(t):
        return np.broadcast_to(np.asarray(f(t), dtype=float), np.shape(t)).copy()
    return g
