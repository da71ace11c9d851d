"""Run configuration files.

A configuration is an INI file.  Every section is optional except ``[run]``::

    [run]
    k = 8                       # wavenumber
    n_obs = 162                 # observation directions (Fibonacci lattice)
    n_inc = 162                 # incident directions
    p = 1, -1, 1                # polarization vector
    full = false                # also store 3x3 matrices
    directions = fibonacci      # or "antipodal": lattice of n/2 nodes closed under d -> -d
    overlap = error             # or "first": overlapping primitives, first listed wins

    [solver]
    tolerance = 1e-6
    max_iterations = 500
    points_per_wavelength = 10
    margin_wavelengths = 1.0
    restart = 60

    [ball:left]                 # one section per primitive, any name after the colon
    center = -0.4, 0, 0
    radius = 0.35
    amplitude = bump            # bump (balls only) or constant
    matrix = A                  # A, A/n, c*A or nine comma-separated complex entries

    [box:slab]
    center = 0, 0, 0
    half_extents = 0.4, 0.2, 0.1
    amplitude = constant
    matrix = A/4

    [imaging]
    method = osm                # osm, dsm or dsm2
    extent = 1.0                # sampling cube [-extent, extent]^3 around center
    spacing = 0.0785            # default: wavelength / 10
    center = 0, 0, 0

    [noise]
    delta = 0.3
    seed = 7

``A`` is ``diag(1, 1.5, 1.2)``.  Complex entries use Python syntax (``1+0.5j``).
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import NoiseSpec
from .forward import (CONTRAST_A, Ball, Box, Bump, Constant, ContrastScene, Primitive,
                      SolverConfig)
from .geometry import (DEFAULT_POLARIZATION, DirectionSet, antipodal_symmetrize,
                       fibonacci_directions)
from .imaging import SamplingGrid, canonical_method


class ConfigError(ValueError):
    """A configuration value is missing, malformed or out of range."""

    def __init__(self, message: str, section: str = "", key: str = "",
                 line: Optional[int] = None):
        where = f"[{section}]" + (f" {key}" if key else "") if section else ""
        if line is not None:
            where = f"line {line}: {where}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.section, self.key, self.line = section, key, line


@dataclass(frozen=True)
class ImagingConfig:
    method: str = "OSM"
    extent: float = 1.0
    spacing: Optional[float] = None
    center: tuple = (0.0, 0.0, 0.0)

    def grid(self, k: float) -> SamplingGrid:
        spacing = self.spacing if self.spacing is not None else 2 * np.pi / k / 10
        return SamplingGrid.cube(self.extent, spacing, self.center)


@dataclass(frozen=True, eq=False)
class RunConfig:
    scene: ContrastScene
    k: float = 12.0
    n_obs: int = 325
    n_inc: int = 325
    p: np.ndarray = field(default_factory=lambda: DEFAULT_POLARIZATION.copy())
    full: bool = False
    directions: str = "fibonacci"
    solver: SolverConfig = field(default_factory=SolverConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    noise: Optional[NoiseSpec] = None

    def direction_sets(self) -> tuple:
        return _directions(self.n_obs, self.directions), _directions(self.n_inc, self.directions)


def _directions(n: int, kind: str) -> DirectionSet:
    if kind == "antipodal":
        return antipodal_symmetrize(fibonacci_directions(n // 2))
    return fibonacci_directions(n)


# --- value parsers -----------------------------------------------------------

def _floats(text: str, count: int) -> np.ndarray:
    parts = [s for s in re.split(r"[,\s]+", text.strip()) if s]
    if len(parts) != count:
        raise ValueError(f"expected {count} numbers, got {len(parts)}")
    vals = np.array([float(s) for s in parts])
    if not np.all(np.isfinite(vals)):
        raise ValueError("values must be finite")
    return vals


_SCALED_A = re.compile(r"^(?:(?P<pre>[^*/]+)\*)?A(?:/(?P<div>[^*/]+))?$")


def parse_matrix(text: str) -> np.ndarray:
    """``A``, ``A/4``, ``0.01*A`` or nine comma-separated complex entries."""
    s = text.replace(" ", "")
    m = _SCALED_A.match(s)
    if m:
        scale = complex(m.group("pre")) if m.group("pre") else 1.0
        if m.group("div"):
            div = complex(m.group("div"))
            if div == 0:
                raise ValueError("division by zero in matrix shorthand")
            scale = scale / div
        return scale * CONTRAST_A
    parts = [x for x in s.split(",") if x]
    if len(parts) != 9:
        raise ValueError("matrix must be A, A/n, c*A or nine complex entries")
    vals = np.array([complex(x) for x in parts])
    if not np.all(np.isfinite(vals)):
        raise ValueError("matrix entries must be finite")
    return vals.reshape(3, 3)


_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


class _Reader:
    """configparser wrapper that reports the line of each offending key."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                                default_section="__defaults__")
        self.parser.optionxform = str.lower
        try:
            self.parser.read_string(text, source=source)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            raise ConfigError(str(exc).splitlines()[0], line=line) from None
        self.lines = {}
        section = None
        for no, raw in enumerate(text.splitlines(), start=1):
            stripped = raw.strip()
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1].strip()
                self.lines[(section, "")] = no
            elif section and "=" in stripped and not stripped.startswith(("#", ";")):
                key = stripped.split("=", 1)[0].strip().lower()
                self.lines.setdefault((section, key), no)

    def error(self, section: str, key: str, message: str) -> ConfigError:
        return ConfigError(message, section, key, self.lines.get((section, key)))

    def get(self, section: str, key: str, convert, default=None, required=False):
        if not self.parser.has_option(section, key):
            if required:
                raise self.error(section, "", f"missing required field '{key}'")
            return default
        raw = self.parser.get(section, key)
        try:
            return convert(raw)
        except (ValueError, TypeError, ZeroDivisionError) as exc:
            raise self.error(section, key, f"invalid value {raw!r}: {exc}") from None

    def check_keys(self, section: str, allowed: set) -> None:
        for key in self.parser.options(section):
            if key not in allowed:
                raise self.error(section, key, f"unknown field '{key}'")


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _positive(s: str) -> float:
    v = float(s)
    if not (np.isfinite(v) and v > 0):
        raise ValueError("must be a positive number")
    return v


def _nonneg(s: str) -> float:
    v = float(s)
    if not (np.isfinite(v) and v >= 0):
        raise ValueError("must be a nonnegative number")
    return v


def _bool(s: str) -> bool:
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ValueError("expected true or false") from None


def _primitive(reader: _Reader, section: str, kind: str) -> Primitive:
    if kind == "ball":
        reader.check_keys(section, {"center", "radius", "amplitude", "matrix"})
    else:
        reader.check_keys(section, {"center", "half_extents", "amplitude", "matrix"})
    center = reader.get(section, "center", lambda s: _floats(s, 3), required=True)
    matrix = reader.get(section, "matrix", parse_matrix, required=True)
    amp_kind = reader.get(section, "amplitude", lambda s: s.strip().lower(),
                          default="bump" if kind == "ball" else "constant")
    if amp_kind not in ("bump", "constant"):
        raise reader.error(section, "amplitude", "amplitude must be bump or constant")
    if amp_kind == "bump" and kind != "ball":
        raise reader.error(section, "amplitude", "bump amplitude needs a ball")
    amplitude = Bump(matrix) if amp_kind == "bump" else Constant(matrix)
    if kind == "ball":
        radius = reader.get(section, "radius", _positive, required=True)
        shape = Ball(tuple(center), radius)
    else:
        half = reader.get(section, "half_extents", lambda s: _floats(s, 3), required=True)
        if np.any(half <= 0):
            raise reader.error(section, "half_extents", "half extents must be positive")
        shape = Box(tuple(center), tuple(half))
    return Primitive(shape, amplitude)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    reader = _Reader(text, source)
    parser = reader.parser
    if not parser.has_section("run"):
        raise ConfigError("missing [run] section")

    reader.check_keys("run", {"k", "n_obs", "n_inc", "p", "full", "directions", "overlap"})
    k = reader.get("run", "k", _positive, default=12.0)
    n_obs = reader.get("run", "n_obs", _positive_int, default=325)
    n_inc = reader.get("run", "n_inc", _positive_int, default=325)
    p = reader.get("run", "p", lambda s: _floats(s, 3), default=DEFAULT_POLARIZATION.copy())
    if np.linalg.norm(p) == 0:
        raise reader.error("run", "p", "polarization must be nonzero")
    full = reader.get("run", "full", _bool, default=False)
    directions = reader.get("run", "directions", lambda s: s.strip().lower(),
                            default="fibonacci")
    if directions not in ("fibonacci", "antipodal"):
        raise reader.error("run", "directions", "directions must be fibonacci or antipodal")
    minimum = 12 if directions == "antipodal" else 6
    for key, n in (("n_obs", n_obs), ("n_inc", n_inc)):
        if n < minimum or (directions == "antipodal" and n % 2):
            raise reader.error("run", key, f"need an {'even ' if minimum == 12 else ''}"
                               f"count of at least {minimum} directions")

    solver = SolverConfig()
    if parser.has_section("solver"):
        fields = {"tolerance": _positive, "max_iterations": _positive_int,
                  "points_per_wavelength": _positive, "margin_wavelengths": _nonneg,
                  "restart": _positive_int}
        reader.check_keys("solver", set(fields))
        kwargs = {key: reader.get("solver", key, conv) for key, conv in fields.items()
                  if parser.has_option("solver", key)}
        if kwargs.get("tolerance", 0.5) >= 1:
            raise reader.error("solver", "tolerance", "tolerance must lie in (0, 1)")
        solver = SolverConfig(**kwargs)

    primitives = []
    for section in parser.sections():
        kind, _, name = section.partition(":")
        kind = kind.strip().lower()
        if kind in ("ball", "box"):
            if not name.strip():
                raise reader.error(section, "", "primitive sections need a name, e.g. [ball:a]")
            try:
                primitives.append(_primitive(reader, section, kind))
            except ConfigError:
                raise
            except ValueError as exc:  # shape or amplitude validation
                raise reader.error(section, "", str(exc)) from None
        elif section not in ("run", "solver", "imaging", "noise"):
            raise reader.error(section, "", f"unknown section [{section}]")
    overlap = reader.get("run", "overlap", lambda s: s.strip().lower(), default="error")
    if overlap not in ("error", "first"):
        raise reader.error("run", "overlap", "overlap must be error or first")
    try:
        scene = ContrastScene(tuple(primitives), overlap)
    except ValueError as exc:
        raise ConfigError(f"invalid scene: {exc}") from None

    imaging = ImagingConfig()
    if parser.has_section("imaging"):
        reader.check_keys("imaging", {"method", "extent", "spacing", "center"})
        imaging = ImagingConfig(
            method=reader.get("imaging", "method", canonical_method, default="OSM"),
            extent=reader.get("imaging", "extent", _nonneg, default=1.0),
            spacing=reader.get("imaging", "spacing", _positive),
            center=tuple(reader.get("imaging", "center", lambda s: _floats(s, 3),
                                    default=np.zeros(3))))

    noise = None
    if parser.has_section("noise"):
        reader.check_keys("noise", {"delta", "seed"})
        delta = reader.get("noise", "delta", _nonneg, required=True)
        seed = reader.get("noise", "seed", int, default=0)
        try:
            noise = NoiseSpec(delta, seed)
        except ValueError as exc:
            raise reader.error("noise", "seed", str(exc)) from None

    return RunConfig(scene=scene, k=k, n_obs=n_obs, n_inc=n_inc, p=p, full=full,
                     directions=directions, solver=solver, imaging=imaging, noise=noise)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_config(text, source=str(path))
