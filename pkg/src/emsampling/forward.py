"""Anisotropic contrast scenes and the direct scattering solver.

The total electric field solves the volume integral equation

    E(x) = E_in(x) + k^2 int G(x, y) P(y) E(y) dy,
    G = (I + grad grad / k^2) exp(ik|x-y|) / (4 pi |x-y|),

discretized by collocation at the centers of a uniform cubic grid.  Off-cell
interactions use the midpoint rule; the self cell is integrated analytically
over the sphere of equal volume.  The resulting block-Toeplitz operator is
applied with zero-padded FFTs and inverted with restarted GMRES.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import fft as sfft
from scipy.sparse.linalg import LinearOperator, gmres

from .datasets import FarFieldData
from .geometry import DirectionSet, tangential_component

logger = logging.getLogger(__name__)

CONTRAST_A = np.diag([1.0, 1.5, 1.2]).astype(complex)
THREADS_ENV = "EMSAMPLING_THREADS"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


class SolverError(RuntimeError):
    """GMRES did not reach the requested residual."""

    def __init__(self, message: str, residual: float, direction=None):
        super().__init__(message)
        self.residual = residual
        self.direction = None if direction is None else np.asarray(direction)


# --- scenes -----------------------------------------------------------------

def _vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be a finite real 3-vector")
    return a


def _matrix3(m, name: str = "amplitude matrix") -> np.ndarray:
    a = np.asarray(m, dtype=complex)
    if a.shape != (3, 3) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be a finite complex 3x3 matrix")
    return a


@dataclass(frozen=True, eq=False)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "ball center"))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"ball radius must be positive, got {self.radius!r}")

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.sum((x - self.center) ** 2, axis=-1) < self.radius ** 2

    @property
    def bounds(self) -> tuple:
        return self.center - self.radius, self.center + self.radius


@dataclass(frozen=True, eq=False)
class Box:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "box center"))
        h = _vec3(self.half_extents, "box half_extents")
        if np.any(h <= 0):
            raise ValueError("box half_extents must be positive")
        object.__setattr__(self, "half_extents", h)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all(np.abs(x - self.center) < self.half_extents, axis=-1)

    @property
    def bounds(self) -> tuple:
        return self.center - self.half_extents, self.center + self.half_extents


Shape = Union[Ball, Box]


@dataclass(frozen=True, eq=False)
class Bump:
    """Smooth amplitude ``M exp(1 - r^2 / (r^2 - |x - c|^2))``; balls only."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _matrix3(self.matrix))


@dataclass(frozen=True, eq=False)
class Constant:
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _matrix3(self.matrix))


@dataclass(frozen=True, eq=False)
class Primitive:
    shape: Shape
    amplitude: Union[Bump, Constant]

    def __post_init__(self):
        if isinstance(self.amplitude, Bump) and not isinstance(self.shape, Ball):
            raise ValueError("bump amplitudes are only defined on balls")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Contrast of this primitive at points ``x`` (..., 3) -> (..., 3, 3)."""
        inside = self.shape.contains(x)
        if isinstance(self.amplitude, Bump):
            r2 = self.shape.radius ** 2
            s = np.sum((x - self.shape.center) ** 2, axis=-1)
            scale = np.zeros(inside.shape)
            with np.errstate(divide="ignore", over="ignore"):
                scale[inside] = np.exp(1.0 - r2 / (r2 - s[inside]))
        else:
            scale = inside.astype(float)
        return scale[..., None, None] * self.amplitude.matrix


def _box_gap(b1: Box, b2: Box) -> float:
    gap = np.abs(b1.center - b2.center) - b1.half_extents - b2.half_extents
    return float(np.max(gap))


def _ball_box_distance(ball: Ball, box: Box) -> float:
    nearest = np.clip(ball.center, box.center - box.half_extents,
                      box.center + box.half_extents)
    return float(np.linalg.norm(ball.center - nearest))


def _overlap(s1: Shape, s2: Shape) -> bool:
    if isinstance(s1, Ball) and isinstance(s2, Ball):
        return np.linalg.norm(s1.center - s2.center) < s1.radius + s2.radius
    if isinstance(s1, Box) and isinstance(s2, Box):
        return _box_gap(s1, s2) < 0
    ball, box = (s1, s2) if isinstance(s1, Ball) else (s2, s1)
    return _ball_box_distance(ball, box) < ball.radius


@dataclass(frozen=True, eq=False)
class ContrastScene:
    """Contrast ``P = eps_r - I`` as a union of primitives.

    Primitives must be pairwise disjoint unless ``overlap="first"``, in
    which case a point inside several primitives takes the contrast of the
    first one listed.
    """

    primitives: tuple = ()
    overlap: str = "error"

    def __post_init__(self):
        if self.overlap not in ("error", "first"):
            raise ValueError("overlap must be 'error' or 'first'")
        prims = tuple(self.primitives)
        for i, a in enumerate(prims):
            if not isinstance(a, Primitive):
                raise TypeError(f"primitive {i} is not a Primitive")
            for j in range(i):
                if self.overlap == "error" and _overlap(prims[j].shape, a.shape):
                    raise ValueError(f"primitives {j} and {i} overlap")
        object.__setattr__(self, "primitives", prims)

    @property
    def empty(self) -> bool:
        return len(self.primitives) == 0

    @property
    def bounding_box(self) -> tuple:
        if self.empty:
            return np.zeros(3), np.zeros(3)
        lo = np.min([p.shape.bounds[0] for p in self.primitives], axis=0)
        hi = np.max([p.shape.bounds[1] for p in self.primitives], axis=0)
        return lo, hi

    def translated(self, t) -> "ContrastScene":
        t = _vec3(t, "translation")
        prims = []
        for p in self.primitives:
            s = p.shape
            if isinstance(s, Ball):
                shape = Ball(s.center + t, s.radius)
            else:
                shape = Box(s.center + t, s.half_extents)
            prims.append(Primitive(shape, p.amplitude))
        return ContrastScene(tuple(prims), self.overlap)


def eval_contrast(scene: ContrastScene, x) -> np.ndarray:
    """``P(x)`` for a point (3,) or points (..., 3); zero outside every primitive."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (3, 3), dtype=complex)
    claimed = np.zeros(x.shape[:-1], dtype=bool)
    for prim in scene.primitives:
        inside = prim.shape.contains(x) & ~claimed
        if np.any(inside):
            out[inside] = prim.evaluate(x[inside])
        claimed |= inside
    return out


def three_balls_scene(scale: complex = 1.0) -> ContrastScene:
    """Three smooth anisotropic balls of the main reconstruction example."""
    A = scale * CONTRAST_A
    return ContrastScene((
        Primitive(Ball((0.4, 0.0, -0.45), 0.3), Bump(A)),
        Primitive(Ball((-0.4, 0.0, 0.0), 0.35), Bump(A)),
        Primitive(Ball((0.4, 0.0, 0.4), 0.4), Bump(A)),
    ))


def two_balls_scene() -> ContrastScene:
    """Two intersecting smooth balls; the upper ball's formula wins where they meet."""
    A = CONTRAST_A / 2
    return ContrastScene((
        Primitive(Ball((0.0, 0.0, 0.4), 0.3), Bump(A)),
        Primitive(Ball((0.0, 0.0, -0.3), 0.5), Bump(A)),
    ), overlap="first")


def cube_scene() -> ContrastScene:
    """Constant-contrast cube standing in for the first non-smooth example."""
    return ContrastScene((Primitive(Box((0, 0, 0), (0.4, 0.4, 0.4)), Constant(CONTRAST_A / 2)),))


def l_shape_scene() -> ContrastScene:
    """L-shaped union of two touching boxes, constant contrast A/4."""
    A = CONTRAST_A / 4
    return ContrastScene((
        Primitive(Box((0.0, 0.0, -0.3), (0.6, 0.25, 0.2)), Constant(A)),
        Primitive(Box((-0.4, 0.0, 0.25), (0.2, 0.25, 0.35)), Constant(A)),
    ))


# --- grids and solver configuration -----------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-6
    max_iterations: int = 500
    points_per_wavelength: float = 10.0
    margin_wavelengths: float = 1.0
    restart: int = 60

    def __post_init__(self):
        if not 0 < self.tolerance < 1:
            raise ValueError("solver tolerance must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.points_per_wavelength <= 0:
            raise ValueError("points_per_wavelength must be positive")
        if self.margin_wavelengths < 0:
            raise ValueError("margin_wavelengths must be >= 0")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Uniform grid of cubic cells; ``origin`` is the center of cell (0, 0, 0)."""

    origin: np.ndarray
    spacing: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin, "grid origin"))
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError("grid dims must be three positive integers")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def covering(cls, lo, hi, spacing: Optional[float] = None,
                 cells: Optional[int] = None) -> "VolumeGrid":
        """Grid whose cells tile the box ``[lo, hi]``.

        Give either the cell size or the number of cells along the longest
        axis.  The box is grown symmetrically to a whole number of cells.
        """
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        extent = np.maximum(hi - lo, 0.0)
        if (spacing is None) == (cells is None):
            raise ValueError("give exactly one of spacing or cells")
        if spacing is None:
            spacing = float(extent.max()) / int(cells)
            if spacing <= 0:
                raise ValueError("cannot size a grid for a degenerate box")
        dims = np.maximum(np.ceil(extent / spacing - 1e-9).astype(int), 1)
        mid = 0.5 * (lo + hi)
        origin = mid - 0.5 * (dims - 1) * spacing
        return cls(origin, float(spacing), tuple(dims))

    @classmethod
    def for_scene(cls, scene: ContrastScene, k: float,
                  cfg: Optional[SolverConfig] = None,
                  cells: Optional[int] = None) -> "VolumeGrid":
        """Default grid: bounding box grown by ``cfg.margin_wavelengths``."""
        cfg = cfg or SolverConfig()
        wavelength = 2 * np.pi / k
        lo, hi = scene.bounding_box
        margin = cfg.margin_wavelengths * wavelength
        lo, hi = lo - margin, hi + margin
        if cells is not None:
            return cls.covering(lo, hi, cells=cells)
        return cls.covering(lo, hi, spacing=wavelength / cfg.points_per_wavelength)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    def axes(self) -> list:
        return [self.origin[a] + self.spacing * np.arange(n) for a, n in enumerate(self.dims)]

    def centers(self) -> np.ndarray:
        """Cell centers, shape ``dims + (3,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def points_per_wavelength(self, k: float) -> float:
        return 2 * np.pi / k / self.spacing


@dataclass
class TotalFieldSolution:
    grid: VolumeGrid
    field: np.ndarray               # dims + (3,), complex
    direction: np.ndarray
    polarization: np.ndarray
    residual: float
    iterations: int = 0
    metadata: dict = field(default_factory=dict)


def incident_plane_wave(x, d, p, k: float) -> np.ndarray:
    """``ik ((d x p) x d) exp(ik x.d)`` at points ``x`` (..., 3)."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    q = tangential_component(d, p)
    phase = np.exp(1j * k * (x @ d))
    return 1j * k * phase[..., None] * q


# --- discrete Green operator -------------------------------------------------

def self_cell_coefficient(k: float, h: float) -> complex:
    """Field at a cell center per unit polarization ``P E`` spread over that cell.

    Principal-value integral of ``k^2 G`` over the sphere of volume ``h^3``
    plus the ``-1/3`` depolarization term.
    """
    a = h * (3.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    ika = 1j * k * a
    return (2.0 / 3.0) * ((1.0 - ika) * np.exp(ika) - 1.0) - 1.0 / 3.0


def dyadic_kernel(r_vec: np.ndarray, k: float) -> np.ndarray:
    """``k^2 G(r)`` as the six unique components (xx, yy, zz, xy, xz, yz).

    ``r_vec`` has shape (..., 3) and must be nonzero.
    """
    r = np.linalg.norm(r_vec, axis=-1)
    kr = k * r
    g = np.exp(1j * kr) / (4.0 * np.pi * r)
    a = k * k * g * (1.0 + 1j / kr - 1.0 / kr ** 2)
    b = k * k * g * (-1.0 + 3.0 / kr ** 2 - 3.0j / kr)
    rh = r_vec / r[..., None]
    x, y, z = rh[..., 0], rh[..., 1], rh[..., 2]
    return np.stack((a + b * x * x, a + b * y * y, a + b * z * z,
                     b * x * y, b * x * z, b * y * z))


_PAIRS = ((0, 3, 4), (3, 1, 5), (4, 5, 2))


class GreenConvolution:
    """FFT application of the discrete operator ``J -> sum_j K(y_i - y_j) J_j``.

    ``J`` is the polarization ``P E`` sampled on a block of ``shape`` cells
    with spacing ``h``; the result is the scattered field on the same block.
    """

    def __init__(self, shape: Sequence[int], h: float, k: float):
        self.shape = tuple(int(n) for n in shape)
        self.h, self.k = float(h), float(k)
        self.fft_shape = tuple(sfft.next_fast_len(2 * n - 1) for n in self.shape)
        offsets = []
        for n, L in zip(self.shape, self.fft_shape):
            idx = np.arange(L)
            offsets.append(np.where(idx < n, idx, idx - L).astype(float))
        m = np.stack(np.meshgrid(*offsets, indexing="ij"), axis=-1)
        valid = np.ones(self.fft_shape, dtype=bool)
        for ax, (n, L) in enumerate(zip(self.shape, self.fft_shape)):
            o = np.abs(offsets[ax])
            sl = [None, None, None]
            sl[ax] = slice(None)
            valid &= (o <= n - 1)[tuple(sl)]
        zero = np.all(m == 0, axis=-1)
        nonzero = valid & ~zero
        kern = np.zeros((6,) + self.fft_shape, dtype=complex)
        kern[:, nonzero] = dyadic_kernel(h * m[nonzero], k) * h ** 3
        self.self_term = self_cell_coefficient(k, h)
        kern[0:3, zero] = self.self_term
        self.kernel_hat = sfft.fftn(kern, axes=(1, 2, 3), workers=thread_count())

    def __call__(self, J: np.ndarray) -> np.ndarray:
        """``J`` shape ``(3,) + shape`` -> field of the same shape."""
        workers = thread_count()
        Jh = sfft.fftn(J, s=self.fft_shape, axes=(1, 2, 3), workers=workers)
        Kh = self.kernel_hat
        out = np.empty_like(Jh)
        for a, (i0, i1, i2) in enumerate(_PAIRS):
            out[a] = Kh[i0] * Jh[0] + Kh[i1] * Jh[1] + Kh[i2] * Jh[2]
        res = sfft.ifftn(out, axes=(1, 2, 3), workers=workers)
        n1, n2, n3 = self.shape
        return res[:, :n1, :n2, :n3]


class ScatteringProblem:
    """Discretized scene on a grid; solves for any incident field.

    Only cells with nonzero contrast carry unknowns.  GMRES runs on the
    smallest block of cells that contains them.
    """

    def __init__(self, scene: ContrastScene, k: float, grid: Optional[VolumeGrid] = None,
                 cfg: Optional[SolverConfig] = None):
        if not k > 0:
            raise ValueError("wavenumber must be positive")
        self.scene, self.k = scene, float(k)
        self.cfg = cfg or SolverConfig()
        self.grid = grid or VolumeGrid.for_scene(scene, k, self.cfg)
        self.metadata = {}
        ppw = self.grid.points_per_wavelength(k)
        if ppw < 6:
            msg = f"grid resolves only {ppw:.2f} points per wavelength (< 6)"
            logger.warning(msg)
            self.metadata["warning"] = msg
        centers = self.grid.centers()
        P = eval_contrast(scene, centers)
        support = np.any(P != 0, axis=(-2, -1))
        self._centers_full = centers
        self._P_full = P
        self.n_support = int(support.sum())
        if self.n_support == 0:
            self.block = None
            return
        idx = np.nonzero(support)
        lo = [int(i.min()) for i in idx]
        hi = [int(i.max()) + 1 for i in idx]
        self.block = tuple(slice(a, b) for a, b in zip(lo, hi))
        self.mask = support[self.block]
        self.points = centers[self.block][self.mask]      # (n, 3)
        self.P = P[self.block][self.mask]                  # (n, 3, 3)
        self._conv = GreenConvolution(self.mask.shape, self.grid.spacing, k)
        self._full_conv = None

    def _scatter(self, x: np.ndarray) -> np.ndarray:
        """(n, 3) field on support cells -> polarization on the block."""
        J = np.zeros((3,) + self.mask.shape, dtype=complex)
        J[:, self.mask] = np.einsum("nab,nb->an", self.P, x)
        return J

    def matvec(self, x: np.ndarray) -> np.ndarray:
        E = x.reshape(-1, 3)
        scat = self._conv(self._scatter(E))[:, self.mask].T
        return (E - scat).ravel()

    def solve_support(self, e_in: np.ndarray, direction=None) -> tuple:
        """Solve on the support for incident values ``e_in`` (n, 3).

        Returns ``(E, residual, iterations)``; raises :class:`SolverError`.
        """
        b = np.asarray(e_in, dtype=complex).ravel()
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            return np.zeros_like(e_in, dtype=complex), 0.0, 0
        n = b.size
        A = LinearOperator((n, n), matvec=self.matvec, dtype=complex)
        tol, restart = self.cfg.tolerance, min(self.cfg.restart, n)
        count = [0]

        def cb(_):
            count[0] += 1

        # scipy's own estimate drifts from the true residual; aim a bit lower
        x, _ = gmres(A, b, rtol=0.5 * tol, atol=0.0, restart=restart,
                     maxiter=max(1, math.ceil(self.cfg.max_iterations / restart)),
                     callback=cb, callback_type="pr_norm")
        residual = np.linalg.norm(b - A.matvec(x)) / bnorm
        if residual > tol:
            raise SolverError(
                f"GMRES stopped at relative residual {residual:.3e} > {tol:.1e} "
                f"after {count[0]} iterations", residual, direction)
        return x.reshape(-1, 3), float(residual), count[0]

    def support_incident(self, d, q) -> np.ndarray:
        """Unit-amplitude plane wave ``q exp(ik x.d)`` on support cells."""
        phase = np.exp(1j * self.k * (self.points @ np.asarray(d, float)))
        return phase[:, None] * np.asarray(q)[None, :]

    def full_field(self, E_support: np.ndarray, e_in_full: np.ndarray) -> np.ndarray:
        """Total field on the whole grid given the support solution."""
        if self.block is None:
            return e_in_full.copy()
        if self._full_conv is None:
            self._full_conv = GreenConvolution(self.grid.dims, self.grid.spacing, self.k)
        J = np.zeros((3,) + self.grid.dims, dtype=complex)
        Jb = np.zeros((3,) + self.mask.shape, dtype=complex)
        Jb[:, self.mask] = np.einsum("nab,nb->an", self.P, E_support)
        J[(slice(None),) + self.block] = Jb
        scat = np.moveaxis(self._full_conv(J), 0, -1)
        return e_in_full + scat

    def far_field_matrix(self, xhat: np.ndarray) -> np.ndarray:
        """Phase factors ``h^3 k^2/(4 pi) exp(-ik xhat.y)`` of shape (n_obs, n)."""
        xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
        scale = self.grid.cell_volume * self.k ** 2 / (4 * np.pi)
        return scale * np.exp(-1j * self.k * (xhat @ self.points.T))

    def far_field(self, E_support: np.ndarray, xhat, phase=None) -> np.ndarray:
        """``u_inf(xhat)`` (n_obs, 3) radiated by the support field."""
        xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
        if self.block is None:
            return np.zeros((len(xhat), 3), dtype=complex)
        if phase is None:
            phase = self.far_field_matrix(xhat)
        J = np.einsum("nab,nb->na", self.P, E_support)
        u = phase @ J
        return u - xhat * np.sum(xhat * u, axis=-1, keepdims=True)


# --- public solver API -------------------------------------------------------

def solve_lippmann_schwinger(scene: ContrastScene, d, p, k: float,
                             cfg: Optional[SolverConfig] = None,
                             grid: Optional[VolumeGrid] = None,
                             problem: Optional[ScatteringProblem] = None) -> TotalFieldSolution:
    """Total field for the incident wave ``ik ((d x p) x d) exp(ik x.d)``."""
    d = np.asarray(d, dtype=float)
    prob = problem or ScatteringProblem(scene, k, grid, cfg)
    centers = prob.grid.centers()
    e_in_full = incident_plane_wave(centers, d, p, k)
    q = 1j * k * tangential_component(d, p)
    if prob.block is None:
        return TotalFieldSolution(prob.grid, e_in_full, d, np.asarray(p, float),
                                  0.0, 0, dict(prob.metadata))
    E, res, its = prob.solve_support(prob.support_incident(d, q), direction=d)
    field_ = prob.full_field(E, e_in_full)
    meta = dict(prob.metadata, support_cells=prob.n_support)
    return TotalFieldSolution(prob.grid, field_, d, np.asarray(p, float), res, its, meta)


def born_total_field(scene: ContrastScene, d, p, k: float,
                     cfg: Optional[SolverConfig] = None,
                     grid: Optional[VolumeGrid] = None) -> TotalFieldSolution:
    """Zeroth Born iterate ``E = E_in``; ``residual`` is that of the full equation."""
    prob = ScatteringProblem(scene, k, grid, cfg)
    e_in = incident_plane_wave(prob.grid.centers(), d, p, k)
    res = 0.0
    if prob.block is not None:
        q = 1j * k * tangential_component(np.asarray(d, float), p)
        b = prob.support_incident(d, q).ravel()
        if np.linalg.norm(b) > 0:
            res = float(np.linalg.norm(b - prob.matvec(b)) / np.linalg.norm(b))
    return TotalFieldSolution(prob.grid, e_in, np.asarray(d, float), np.asarray(p, float),
                              res, 0, dict(prob.metadata, born=True))


def far_field_from_solution(scene: ContrastScene, sol: TotalFieldSolution, xhat,
                            k: float) -> np.ndarray:
    """``(k^2/4pi)(I - xhat xhat^T) int P E exp(-ik xhat.y) dy`` for one or many ``xhat``."""
    xhat_arr = np.asarray(xhat, dtype=float)
    single = xhat_arr.ndim == 1
    xs = np.atleast_2d(xhat_arr)
    centers = sol.grid.centers().reshape(-1, 3)
    P = eval_contrast(scene, centers)
    J = np.einsum("nab,nb->na", P, sol.field.reshape(-1, 3))
    keep = np.any(J != 0, axis=1)
    scale = sol.grid.cell_volume * k ** 2 / (4 * np.pi)
    u = scale * (np.exp(-1j * k * (xs @ centers[keep].T)) @ J[keep])
    u = u - xs * np.sum(xs * u, axis=-1, keepdims=True)
    return u[0] if single else u


def tangent_basis(d: np.ndarray) -> tuple:
    """Two orthonormal vectors spanning the plane orthogonal to ``d``."""
    d = np.asarray(d, float)
    helper = np.eye(3)[int(np.argmin(np.abs(d)))]
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2


def assemble_far_field_data(scene: ContrastScene, ds_obs: DirectionSet, ds_inc: DirectionSet,
                            p, k: float, cfg: Optional[SolverConfig] = None,
                            full: bool = False, grid: Optional[VolumeGrid] = None,
                            born: bool = False, workers: Optional[int] = None,
                            problem: Optional[ScatteringProblem] = None) -> FarFieldData:
    """Synthetic far-field data for every incident direction of ``ds_inc``.

    Polarized mode solves once per direction with polarization
    ``(d x p) x d``.  Full mode solves for two orthonormal tangential
    polarizations and stores ``u_inf(xhat, d)`` acting as zero on ``d``.
    ``born=True`` skips the solve and radiates the incident field.
    """
    p = np.asarray(p, dtype=float)
    prob = problem or ScatteringProblem(scene, k, grid, cfg)
    n_obs, n_inc = len(ds_obs), len(ds_inc)
    pol = np.zeros((n_obs, n_inc, 3), dtype=complex)
    fullt = np.zeros((n_obs, n_inc, 3, 3), dtype=complex) if full else None
    meta = dict(prob.metadata, solver="born" if born else "gmres",
                grid_spacing=prob.grid.spacing, grid_dims=prob.grid.dims,
                support_cells=prob.n_support)
    if prob.block is None:
        return FarFieldData(k, p, ds_obs, ds_inc, polarized=pol, full=fullt, metadata=meta)

    phase = prob.far_field_matrix(ds_obs.nodes)
    residuals = np.zeros(n_inc)

    def radiate(d, q):
        e_in = prob.support_incident(d, q)
        if born:
            return prob.far_field(e_in, ds_obs.nodes, phase), 0.0
        E, res, _ = prob.solve_support(e_in, direction=d)
        return prob.far_field(E, ds_obs.nodes, phase), res

    def one(j):
        d = ds_inc.nodes[j]
        if full:
            e1, e2 = tangent_basis(d)
            u1, r1 = radiate(d, e1)
            u2, r2 = radiate(d, e2)
            mat = u1[:, :, None] * e1[None, None, :] + u2[:, :, None] * e2[None, None, :]
            col = mat @ tangential_component(d, p)
            return j, col, mat, max(r1, r2)
        col, res = radiate(d, tangential_component(d, p))
        return j, col, None, res

    nworkers = workers or thread_count()
    if nworkers > 1:
        with ThreadPoolExecutor(nworkers) as pool:
            results = pool.map(one, range(n_inc))
            for j, col, mat, res in results:
                pol[:, j] = col
                if full:
                    fullt[:, j] = mat
                residuals[j] = res
    else:
        for j in range(n_inc):
            _, col, mat, res = one(j)
            pol[:, j] = col
            if full:
                fullt[:, j] = mat
            residuals[j] = res
            logger.debug("incident direction %d/%d residual %.2e", j + 1, n_inc, res)
    meta["max_residual"] = float(residuals.max())
    meta["residuals"] = residuals
    return FarFieldData(k, p, ds_obs, ds_inc, polarized=pol, full=fullt, metadata=meta)
