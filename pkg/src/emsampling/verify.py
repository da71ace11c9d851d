"""Numerical checks of the identities and estimates behind the sampling methods.

Each check returns :class:`Check` records pairing a measured quantity with
its required tolerance.  ``run_suite`` drives them for ``emsampling verify``
and the acceptance tests call the same functions.  Scenes and direction
sets are fixed and every random draw is seeded, so results are reproducible.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass

import numpy as np

from .datasets import NoiseSpec, add_noise
from .forward import (CONTRAST_A, Ball, Bump, ContrastScene, Primitive, ScatteringProblem,
                      VolumeGrid, assemble_far_field_data, three_balls_scene)
from .geometry import (FOUR_PI, DEFAULT_POLARIZATION, antipodal_symmetrize,
                       fibonacci_directions, funk_hecke_lhs, spherical_bessel_j)
from .imaging import (SamplingGrid, dsm_double_values, dsm_values, nearest_local_maximum,
                      normalize_volume, osm_operator_values, osm_values, stability_gap,
                      sweep_methods, value_at)
from .operators import norm_H_phi_sq, reciprocity_residual, symmetrize_reciprocity


@dataclass
class Check:
    name: str
    measured: float
    required: str
    passed: bool
    seconds: float = 0.0


@dataclass(frozen=True)
class Scale:
    name: str
    k: float
    n_directions: int          # per set; antipodal sets use n/2 lattice nodes
    cells: int                 # solver grid for the reciprocity study
    n_decay_obs: int           # observation set resolving the decay to 20 wavelengths
    equivalence_points: int    # lattice points per axis for the equivalence sweep


DESK = Scale("desk", k=8.0, n_directions=162, cells=32, n_decay_obs=12000,
             equivalence_points=33)
FULL = Scale("full", k=12.0, n_directions=326, cells=48, n_decay_obs=20000,
              equivalence_points=49)
SCALES = {"desk": DESK, "full": FULL}

NOISE_SEED = 20240917


def wavelength(k: float) -> float:
    return 2 * np.pi / k


def _rel(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    den = np.maximum(np.abs(a), np.abs(b))
    return np.where(den > 0, np.abs(a - b) / np.where(den > 0, den, 1.0), 0.0)


# --- shared synthetic data ---------------------------------------------------

def reciprocity_scene() -> ContrastScene:
    """One smooth anisotropic ball placed off the origin."""
    return ContrastScene((Primitive(Ball((0.1, -0.05, 0.2), 0.3), Bump(CONTRAST_A)),))


def single_ball_scene() -> ContrastScene:
    return ContrastScene((Primitive(Ball((0.0, 0.0, 0.0), 0.3), Bump(CONTRAST_A)),))


@functools.lru_cache(maxsize=4)
def reciprocity_data(scale: Scale, cells: int):
    ds = antipodal_symmetrize(fibonacci_directions(scale.n_directions // 2))
    scene = reciprocity_scene()
    grid = VolumeGrid.for_scene(scene, scale.k, cells=cells)
    return assemble_far_field_data(scene, ds, ds, DEFAULT_POLARIZATION, scale.k,
                                   full=True, grid=grid)


@functools.lru_cache(maxsize=2)
def three_ball_data(scale: Scale):
    ds = fibonacci_directions(scale.n_directions)
    return assemble_far_field_data(three_balls_scene(), ds, ds, DEFAULT_POLARIZATION, scale.k)


@functools.lru_cache(maxsize=2)
def decay_data(scale: Scale):
    return assemble_far_field_data(single_ball_scene(), fibonacci_directions(scale.n_decay_obs),
                                   fibonacci_directions(162), DEFAULT_POLARIZATION, scale.k)


def noisy(data, delta: float, seed: int = NOISE_SEED):
    return add_noise(data, NoiseSpec(delta, seed))


def sampling_grid(k: float, extent: float = 1.0) -> SamplingGrid:
    """Cube ``[-extent, extent]^3`` sampled at a tenth of a wavelength."""
    return SamplingGrid.cube(extent, wavelength(k) / 10)


def _timed(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        checks = fn(*args, **kwargs)
        dt = time.perf_counter() - t0
        for c in checks:
            c.seconds = dt / len(checks)
        return checks
    return wrapper


# --- checks ------------------------------------------------------------------

@_timed
def check_funk_hecke(scale: Scale = DESK, n_nodes: int = 2000, n_points: int = 50) -> list:
    rng = np.random.default_rng(1)
    u = rng.normal(size=(n_points, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    radii = rng.uniform(0.0, 12.0 / scale.k, n_points)
    x = u * radii[:, None]
    approx = funk_hecke_lhs(fibonacci_directions(n_nodes), scale.k, x)
    exact = FOUR_PI * spherical_bessel_j(0, scale.k * radii)
    err = float(np.max(np.abs(approx - exact)) / FOUR_PI)
    return [Check(f"Funk-Hecke quadrature, {n_nodes} nodes, k|x| <= 12",
                  err, "<= 1e-3 (relative to 4 pi)", err <= 1e-3)]


@_timed
def check_reciprocity(scale: Scale = DESK) -> list:
    coarse = reciprocity_residual(reciprocity_data(scale, scale.cells))
    fine = reciprocity_residual(reciprocity_data(scale, 2 * scale.cells))
    ratio = coarse / fine if fine > 0 else np.inf
    return [
        Check(f"reciprocity residual, {scale.cells}^3 grid", coarse, "<= 5e-3", coarse <= 5e-3),
        Check(f"residual ratio {scale.cells}^3 / {2 * scale.cells}^3", ratio, ">= 2",
              ratio >= 2.0),
    ]


@_timed
def check_lemma_identities(scale: Scale = DESK, n_points: int = 100) -> list:
    data = symmetrize_reciprocity(reciprocity_data(scale, scale.cells))
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    p, k = data.p, data.k
    osm_err = float(np.max(_rel(osm_values(data, pts, p, k), osm_operator_values(data, pts, p, k))))
    dsm_err = float(np.max(_rel(dsm_values(data, pts, p, k), dsm_double_values(data, pts, p, k))))
    return [
        Check("OSM definition vs operator form", osm_err, "<= 1e-12 relative", osm_err <= 1e-12),
        Check("DSM operator vs double-sum form", dsm_err, "<= 1e-12 relative", dsm_err <= 1e-12),
    ]


def _slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def osm_decay_envelope(data, radius: float, lo: float, hi: float, n_rays: int = 6,
                       samples_per_wavelength: int = 8, seed: int = 3) -> tuple:
    """Shell maxima of I_OSM along random rays from a ball at the origin.

    Returns ``(shell midpoints, envelope)`` with distances measured from the
    ball surface; shells are one wavelength wide.
    """
    lam = wavelength(data.k)
    rng = np.random.default_rng(seed)
    rays = rng.normal(size=(n_rays, 3))
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    dist = np.arange(lo, hi, lam / samples_per_wavelength)
    pts = (radius + dist[None, :, None]) * rays[:, None, :]
    vals = osm_values(data, pts.reshape(-1, 3), data.p, data.k).reshape(n_rays, len(dist))
    edges = np.arange(lo, hi + 1e-9 * lam, lam)
    mids, env = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (dist >= a) & (dist < b)
        if np.any(sel):
            mids.append(0.5 * (a + b))
            env.append(vals[:, sel].max())
    return np.array(mids), np.array(env)


@_timed
def check_decay(scale: Scale = DESK) -> list:
    lam = wavelength(scale.k)
    scene = single_ball_scene()
    ball = scene.primitives[0].shape
    prob = ScatteringProblem(scene, scale.k)
    direction = np.array([0.3, 0.5, 0.81])
    direction /= np.linalg.norm(direction)
    dist = np.geomspace(5 * lam, 50 * lam, 40)
    h = [norm_H_phi_sq((d + ball.radius) * direction, prob.points, prob.grid.cell_volume,
                       DEFAULT_POLARIZATION, scale.k) for d in dist]
    h_slope = _slope(dist, h)
    mids, env = osm_decay_envelope(decay_data(scale), ball.radius, 3 * lam, 20 * lam)
    osm_slope = _slope(mids, env)
    return [
        Check("log-log slope of ||H phi||^2, 5 to 50 wavelengths", h_slope, "in [-2.3, -1.7]",
              -2.3 <= h_slope <= -1.7),
        Check("log-log slope of I_OSM envelope, 3 to 20 wavelengths", osm_slope, "<= -1.5",
              osm_slope <= -1.5),
    ]


@_timed
def check_stability(scale: Scale = DESK, deltas=(0.3, 0.6, 0.9)) -> list:
    data = three_ball_data(scale)
    grid = sampling_grid(scale.k)
    checks = []
    worst_norm_err = 0.0
    for delta in deltas:
        nd = noisy(data, delta)
        for n in range(3):
            lhs = np.linalg.norm(nd.polarized[..., n] - data.polarized[..., n], 2)
            rhs = delta * np.linalg.norm(data.polarized[..., n], 2)
            worst_norm_err = max(worst_norm_err, abs(lhs - rhs) / rhs)
        rep = stability_gap(data, nd, grid)
        checks.append(Check(f"stability gap / bound, delta = {delta}", rep.max_gap / rep.bound,
                            "<= 1 at every grid point", rep.passed))
    checks.append(Check("noise norm ||D_n,delta - D_n|| vs delta ||D_n||", worst_norm_err,
                        "<= 1e-12 relative", worst_norm_err <= 1e-12))
    return checks


@_timed
def check_equivalence(scale: Scale = DESK, delta: float = 0.3) -> list:
    data = three_ball_data(scale)
    n = scale.equivalence_points
    grid = SamplingGrid.cube(1.0, 2.0 / (n - 1))
    checks = []
    for label, d in (("clean", data), (f"{int(round(100 * delta))}% noise", noisy(data, delta))):
        vols = sweep_methods(d, grid, ("OSM", "DSM"))
        osm, dsm = vols["OSM"].values, vols["DSM"].values
        bound = FOUR_PI * np.sqrt(osm)
        violations = int(np.count_nonzero(dsm > bound))
        ratio = float(np.max(dsm / np.where(bound > 0, bound, np.inf)))
        checks.append(Check(f"DSM <= 4 pi sqrt(OSM), {label}, {n}^3 grid: max ratio", ratio,
                            "<= 1, zero violations", violations == 0))
    return checks


# --- checks used only by the acceptance tests ---------------------------------

def localization(data, grid: SamplingGrid, centers, tol_cells: float, methods=("OSM", "DSM2"),
                 fraction: float = 1.0 / 3.0) -> list:
    """Peak-to-center distances and center values of normalized volumes."""
    vols = sweep_methods(data, grid, methods)
    checks = []
    for m in methods:
        vol = normalize_volume(vols[m])
        dists = [nearest_local_maximum(vol, c)[1] / grid.spacing for c in centers]
        values = [value_at(vol, c) for c in centers]
        checks.append(Check(f"{m}: nearest local maximum to each center (cells)", max(dists),
                            f"<= {tol_cells}", max(dists) <= tol_cells))
        checks.append(Check(f"{m}: smallest normalized value at a center", min(values),
                            f">= {fraction:.4f}", min(values) >= fraction))
    return checks


def born_agreement(scale: Scale = DESK, weak: float = 0.01) -> Check:
    scene = three_balls_scene(weak)
    ds = fibonacci_directions(scale.n_directions)
    prob = ScatteringProblem(scene, scale.k)
    full = assemble_far_field_data(scene, ds, ds, DEFAULT_POLARIZATION, scale.k, problem=prob)
    born = assemble_far_field_data(scene, ds, ds, DEFAULT_POLARIZATION, scale.k, problem=prob,
                                   born=True)
    rel = float(np.linalg.norm(full.polarized - born.polarized) / np.linalg.norm(full.polarized))
    return Check(f"solver vs Born far fields, contrast {weak} A", rel, "<= 0.05", rel <= 0.05)


SUITES = {
    "funk-hecke": (check_funk_hecke,),
    "reciprocity": (check_reciprocity,),
    "lemma-identities": (check_lemma_identities,),
    "decay": (check_decay,),
    "stability": (check_stability,),
    "equivalence": (check_equivalence,),
}


def run_suite(name: str, scale: Scale = DESK) -> list:
    if name == "all":
        fns = [fn for group in SUITES.values() for fn in group]
    elif name in SUITES:
        fns = SUITES[name]
    else:
        raise KeyError(name)
    checks = []
    for fn in fns:
        checks.extend(fn(scale))
    return checks


def format_table(checks: list) -> str:
    rows = [("check", "measured", "required", "status", "time")]
    for c in checks:
        rows.append((c.name, f"{c.measured:.4g}", c.required, "PASS" if c.passed else "FAIL",
                     f"{c.seconds:.1f}s"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
