"""Orthogonality and direct sampling imaging functionals.

For a sampling point ``y`` and a fixed vector ``p``:

* OSM, definition form:
  ``sum_d w_d |sum_x w_x D(x, d) . t(x) exp(ik x.y)|^2`` with ``t(x) = (x x p) x x``.
* OSM, operator form: ``sum_x w_x |p . (F phi_y)(x)|^2``.
* DSM: ``|<F phi_y, phi_y>|``, also available as the rearranged double sum.

The two OSM forms agree exactly on reciprocal data observed and illuminated
from the same antipodally closed direction set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .datasets import FarFieldData
from .geometry import FOUR_PI, tangential_component
from .operators import F_phi_batch, _polarized_scale, discrete_operator_norm

METHODS = ("OSM", "DSM", "DSM2")
CHUNK = 2048


class DegenerateVolumeError(ValueError):
    """Raised when a volume has no positive value to normalize by."""


def canonical_method(method: str) -> str:
    m = str(method).upper().replace("²", "2").replace("^2", "2")
    if m not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from osm, dsm, dsm2")
    return m


@dataclass(frozen=True, eq=False)
class SamplingGrid:
    origin: np.ndarray
    spacing: float
    dims: tuple

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float)
        if origin.shape != (3,):
            raise ValueError("sampling grid origin must be a 3-vector")
        if not self.spacing > 0:
            raise ValueError("sampling grid spacing must be positive")
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError("sampling grid dims must be >= 1")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def cube(cls, extent: float = 1.0, spacing: float = 0.1, center=(0.0, 0.0, 0.0)):
        """Lattice of spacing ``spacing`` filling ``center + [-extent, extent]^3``.

        Points are placed symmetrically about ``center``.
        """
        if not extent >= 0 or not spacing > 0:
            raise ValueError("need extent >= 0 and spacing > 0")
        n = int(np.floor(2 * extent / spacing + 1e-9)) + 1
        origin = np.asarray(center, float) - 0.5 * (n - 1) * spacing
        return cls(origin, float(spacing), (n, n, n))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def axes(self) -> list:
        return [self.origin[a] + self.spacing * np.arange(n) for a, n in enumerate(self.dims)]

    def points(self) -> np.ndarray:
        """All lattice points, shape ``(size, 3)``, C order over ``dims``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, 3)

    def nearest_index(self, x) -> tuple:
        idx = np.rint((np.asarray(x, float) - self.origin) / self.spacing).astype(int)
        return tuple(np.clip(idx, 0, np.array(self.dims) - 1))

    def point(self, index) -> np.ndarray:
        return self.origin + self.spacing * np.asarray(index, float)


@dataclass
class ImagingVolume:
    grid: SamplingGrid
    values: np.ndarray
    method: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.dims)
        if np.any(self.values < 0):
            raise ValueError("imaging values must be nonnegative")

    def argmax_point(self) -> np.ndarray:
        idx = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return self.grid.point(idx)


# --- batched kernels ---------------------------------------------------------

def _projected_columns(data: FarFieldData, p: np.ndarray) -> np.ndarray:
    """``a[i, j] = D(xhat_i, d_j) . t(xhat_i)`` with columns built for ``p``."""
    if data.polarized is None and data.has_full:
        q = tangential_component(data.inc.nodes, p)
        D = np.einsum("ijab,jb->ija", data.full, q)
    else:
        D = data.polarized * _polarized_scale(data, p)
    t = tangential_component(data.obs.nodes, p)
    return np.einsum("ija,ia->ij", D, t)


def _inner_x_sums(data: FarFieldData, points: np.ndarray, p, k: float) -> np.ndarray:
    """``G[y, j] = sum_i w_i D(xhat_i, d_j).t_i exp(ik xhat_i.y)``; (n_points, N_inc)."""
    a = _projected_columns(data, p) * data.obs.weights[:, None]
    phase = np.exp(1j * k * (points @ data.obs.nodes.T))
    return phase @ a


def _chunked(points: np.ndarray, fn) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(len(points))
    for s in range(0, len(points), CHUNK):
        out[s:s + CHUNK] = fn(points[s:s + CHUNK])
    return out


def osm_values(data: FarFieldData, points, p, k: float) -> np.ndarray:
    """Definition-form OSM at many points."""
    p = np.asarray(p, dtype=float)

    def fn(pts):
        G = _inner_x_sums(data, pts, p, k)
        return np.abs(G) ** 2 @ data.inc.weights

    return _chunked(points, fn)


def dsm_double_values(data: FarFieldData, points, p, k: float) -> np.ndarray:
    """DSM as the double sum over incident and observation directions."""
    p = np.asarray(p, dtype=float)

    def fn(pts):
        G = _inner_x_sums(data, pts, p, k)
        phase = np.exp(-1j * k * (pts @ data.inc.nodes.T)) * data.inc.weights
        return np.abs(np.sum(phase * G, axis=1))

    return _chunked(points, fn)


def _operator_pair(data: FarFieldData, pts: np.ndarray, p: np.ndarray, k: float) -> tuple:
    """(OSM operator form, DSM) sharing one evaluation of ``F phi``."""
    Fphi = F_phi_batch(data, pts, p, k)                     # (n, N_obs, 3)
    w = data.obs.weights
    osm = np.abs(Fphi @ p) ** 2 @ w
    t = tangential_component(data.obs.nodes, p)
    conj_phi = t[None, :, :] * np.exp(1j * k * (pts @ data.obs.nodes.T))[:, :, None]
    dsm = np.abs(np.einsum("nia,nia,i->n", Fphi, conj_phi, w))
    return osm, dsm


def osm_operator_values(data: FarFieldData, points, p, k: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return _chunked(points, lambda pts: _operator_pair(data, pts, p, k)[0])


def dsm_values(data: FarFieldData, points, p, k: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return _chunked(points, lambda pts: _operator_pair(data, pts, p, k)[1])


# --- pointwise entry points -------------------------------------------------

def osm_value(data: FarFieldData, y_s, p=None, k: Optional[float] = None) -> float:
    """OSM functional in its defining double-integral form."""
    p = data.p if p is None else p
    k = data.k if k is None else k
    return float(osm_values(data, np.asarray(y_s, float)[None, :], p, k)[0])


def osm_operator_value(data: FarFieldData, y_s, p=None, k: Optional[float] = None) -> float:
    """OSM functional as ``||p . F phi_y||^2``."""
    p = data.p if p is None else p
    k = data.k if k is None else k
    return float(osm_operator_values(data, np.asarray(y_s, float)[None, :], p, k)[0])


def dsm_value(data: FarFieldData, y_s, p=None, k: Optional[float] = None) -> float:
    """DSM functional ``|<F phi_y, phi_y>|``."""
    p = data.p if p is None else p
    k = data.k if k is None else k
    return float(dsm_values(data, np.asarray(y_s, float)[None, :], p, k)[0])


def dsm_double_integral_value(data: FarFieldData, y_s, p=None,
                              k: Optional[float] = None) -> float:
    p = data.p if p is None else p
    k = data.k if k is None else k
    return float(dsm_double_values(data, np.asarray(y_s, float)[None, :], p, k)[0])


# --- sweeps and post-processing ----------------------------------------------

def sweep_methods(data: FarFieldData, grid: SamplingGrid, methods=METHODS,
                  p=None, k: Optional[float] = None) -> dict:
    """Evaluate several functionals on ``grid`` sharing ``F phi`` per point.

    ``p`` defaults to the data polarization and is normalized to unit length.
    """
    methods = [canonical_method(m) for m in methods]
    p_in = np.asarray(data.p if p is None else p, dtype=float)
    p_norm = float(np.linalg.norm(p_in))
    if p_norm == 0:
        raise ValueError("polarization vector must be nonzero")
    pu = p_in / p_norm
    k = data.k if k is None else float(k)
    pts = grid.points()
    osm = np.empty(len(pts))
    dsm = np.empty(len(pts))
    for s in range(0, len(pts), CHUNK):
        osm[s:s + CHUNK], dsm[s:s + CHUNK] = _operator_pair(data, pts[s:s + CHUNK], pu, k)
    meta = dict(k=k, p=p_in.tolist(), p_norm=p_norm, noise_level=data.noise_level,
                n_obs=len(data.obs), n_inc=len(data.inc))
    values = {"OSM": osm, "DSM": dsm, "DSM2": dsm ** 2}
    return {m: ImagingVolume(grid, values[m], m, dict(meta)) for m in methods}


def sweep(data: FarFieldData, grid: SamplingGrid, method: str = "OSM",
          p=None, k: Optional[float] = None) -> ImagingVolume:
    """Imaging functional ``method`` (OSM, DSM or DSM2) at every lattice point."""
    m = canonical_method(method)
    return sweep_methods(data, grid, (m,), p, k)[m]


def normalize_volume(vol: ImagingVolume) -> ImagingVolume:
    vmax = float(np.max(vol.values))
    if not vmax > 0:
        raise DegenerateVolumeError("volume has no positive value; cannot normalize")
    meta = dict(vol.metadata, normalized_by=vmax)
    return ImagingVolume(vol.grid, vol.values / vmax, vol.method, meta)


def isovalue(vol: ImagingVolume, fraction: float) -> float:
    """``fraction * max(values)`` for ``fraction`` in (0, 1]."""
    if not 0 < fraction <= 1:
        raise ValueError(f"isovalue fraction must lie in (0, 1], got {fraction!r}")
    return float(fraction * np.max(vol.values))


def local_maxima(vol: ImagingVolume) -> np.ndarray:
    """Indices (m, 3) of lattice points not exceeded by any of their 26 neighbours."""
    v = vol.values
    peak = ndimage.maximum_filter(v, size=3, mode="constant", cval=-np.inf)
    return np.argwhere((v == peak) & (v > 0))


def nearest_local_maximum(vol: ImagingVolume, x) -> tuple:
    """``(point, distance)`` of the local maximum closest to ``x``."""
    idx = local_maxima(vol)
    pts = vol.grid.origin + vol.grid.spacing * idx
    dist = np.linalg.norm(pts - np.asarray(x, float), axis=1)
    best = int(np.argmin(dist))
    return pts[best], float(dist[best])


def value_at(vol: ImagingVolume, x) -> float:
    """Volume value at the lattice point nearest to ``x``."""
    return float(vol.values[vol.grid.nearest_index(x)])


@dataclass
class StabilityReport:
    delta_eff: float
    operator_norm: float
    max_gap: float
    bound: float
    passed: bool


def stability_gap(data: FarFieldData, noisy: FarFieldData, grid: SamplingGrid,
                  p=None, k: Optional[float] = None) -> StabilityReport:
    """Largest ``I_OSM - I_OSM,noisy`` on ``grid`` against its theoretical bound.

    ``delta_eff = ||F - F_noisy|| / ||F||`` uses the ``sqrt(w)``-scaled data
    matrices; the bound is ``|p|^2 (4 pi)^2 ||F||^2 (delta_eff^2 + 2 delta_eff)``.
    """
    if not (data.obs.same_as(noisy.obs) and data.inc.same_as(noisy.inc)):
        raise ValueError("clean and noisy data live on different direction sets")
    p = np.asarray(data.p if p is None else p, dtype=float)
    k = data.k if k is None else float(k)
    D, Dn = data.polarized_tensor(), noisy.polarized_tensor()
    norm_F = discrete_operator_norm(data)
    diff = FarFieldData(data.k, data.p, data.obs, data.inc, polarized=D - Dn)
    delta = discrete_operator_norm(diff) / norm_F if norm_F > 0 else 0.0
    pts = grid.points()
    clean = osm_operator_values(data, pts, p, k)
    dirty = osm_operator_values(noisy, pts, p, k)
    gap = float(np.max(clean - dirty))
    bound = float(np.dot(p, p) * FOUR_PI ** 2 * norm_F ** 2 * (delta ** 2 + 2 * delta))
    return StabilityReport(delta, norm_F, gap, bound, bool(np.all(clean - dirty <= bound)))
