"""Far-field and Herglotz operators on tangential sphere fields.

Discrete conventions: a field on a :class:`DirectionSet` is an array of
complex 3-vectors, one per node; the sphere integral is the weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .datasets import FarFieldData
from .geometry import DirectionSet, spherical_bessel_j, tangential_component


@dataclass(frozen=True, eq=False)
class TangentialField:
    directions: DirectionSet
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (len(self.directions), 3):
            raise ValueError(f"values must have shape ({len(self.directions)}, 3)")
        object.__setattr__(self, "values", v)

    def normal_defect(self) -> float:
        """Largest ``|d_j . values[j]|``; zero for an exactly tangential field."""
        return float(np.max(np.abs(np.sum(self.directions.nodes * self.values, axis=1))))

    def inner(self, other: "TangentialField") -> complex:
        """L^2_t inner product ``sum_j w_j f_j . conj(g_j)``."""
        prod = np.sum(self.values * np.conj(other.values), axis=1)
        return complex(self.directions.weights @ prod)


@dataclass(frozen=True, eq=False)
class FarFieldOperatorView:
    """The far-field operator ``(F g)(xhat) = int u_inf(xhat, d) g(d) ds(d)``."""

    data: FarFieldData

    @property
    def weights(self) -> np.ndarray:
        return self.data.inc.weights

    def apply(self, g: TangentialField) -> TangentialField:
        """``F g`` for an arbitrary tangential density (needs full matrices)."""
        if not self.data.has_full:
            raise ValueError("applying F to a general density needs full matrices")
        if not g.directions.same_as(self.data.inc):
            raise ValueError("density must live on the incident direction set")
        vals = np.einsum("ijab,j,jb->ia", self.data.full, self.weights, g.values)
        return TangentialField(self.data.obs, vals)

    def dense_matrix(self, full: bool = False) -> np.ndarray:
        """Data matrix with ``sqrt(w)`` scaling on both axes.

        Polarized: shape (3 N_obs, N_inc).  Full: shape (3 N_obs, 3 N_inc).
        """
        wo = np.sqrt(self.data.obs.weights)
        wi = np.sqrt(self.data.inc.weights)
        n_obs, n_inc = self.data.shape
        if full:
            if not self.data.has_full:
                raise ValueError("no full matrices stored")
            M = self.data.full * wo[:, None, None, None] * wi[None, :, None, None]
            return M.transpose(0, 2, 1, 3).reshape(3 * n_obs, 3 * n_inc)
        D = self.data.polarized_tensor() * wo[:, None, None] * wi[None, :, None]
        return D.transpose(0, 2, 1).reshape(3 * n_obs, n_inc)


def _polarized_scale(data: FarFieldData, p: np.ndarray) -> float:
    """Factor turning stored columns ``u q(p_data)`` into ``u q(p)``."""
    pd = data.p
    scale = float(np.dot(p, pd) / np.dot(pd, pd))
    if np.linalg.norm(p - scale * pd) > 1e-12 * max(1.0, np.linalg.norm(p)):
        raise ValueError("polarized data only support test vectors parallel to "
                         "the data polarization; store full matrices instead")
    return scale


def test_function_phi(y_s, p, k: float, ds: DirectionSet) -> TangentialField:
    """``phi(d) = ((d x p) x d) exp(-ik d.y_s)`` sampled on ``ds``."""
    y_s = np.asarray(y_s, dtype=float)
    q = tangential_component(ds.nodes, p)
    return TangentialField(ds, q * np.exp(-1j * k * (ds.nodes @ y_s))[:, None])


def F_phi_batch(data: FarFieldData, points: np.ndarray, p, k: float) -> np.ndarray:
    """``(F phi_y)(xhat_i)`` for many sampling points; shape (n_points, N_obs, 3)."""
    p = np.asarray(p, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coeff = data.inc.weights[None, :] * np.exp(-1j * k * (points @ data.inc.nodes.T))
    if data.polarized is None and data.has_full:
        # build columns for this p directly from the matrices
        q = tangential_component(data.inc.nodes, p)
        D = np.einsum("ijab,jb->ija", data.full, q)
    else:
        D = data.polarized * _polarized_scale(data, p)
    n_obs, n_inc = data.shape
    flat = D.transpose(0, 2, 1).reshape(3 * n_obs, n_inc)
    return (coeff @ flat.T).reshape(len(points), n_obs, 3)


def apply_F_to_phi(op: FarFieldOperatorView, y_s, p, k: float) -> TangentialField:
    """``F phi_{y_s}`` using only polarized columns; no tangential projection."""
    vals = F_phi_batch(op.data, np.asarray(y_s, dtype=float)[None, :], p, k)[0]
    return TangentialField(op.data.obs, vals)


def herglotz(g: TangentialField, x, k: float) -> np.ndarray:
    """``(H g)(x) = sum_j w_j g_j exp(ik x.d_j)`` at one point or many (..., 3)."""
    x = np.asarray(x, dtype=float)
    ds = g.directions
    phase = np.exp(1j * k * (x @ ds.nodes.T)) * ds.weights
    return phase @ g.values


def closed_form_H_phi(z, p, k: float) -> np.ndarray:
    """``int ((d x p) x d) exp(-ik d.z) ds(d)`` in closed form.

    Equals ``(4 pi / 3) [(2 j0 - j2) p + 3 j2 (p.zhat) zhat]`` with
    ``j_l = j_l(k|z|)``; tends to ``(8 pi / 3) p`` as ``z -> 0``.
    Accepts ``z`` of shape (3,) or (..., 3).
    """
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    r = np.linalg.norm(z, axis=-1)
    t = k * r
    j0 = np.asarray(spherical_bessel_j(0, t))
    j2 = np.asarray(spherical_bessel_j(2, t))
    tiny = r < 1e-6
    safe_r = np.where(tiny, 1.0, r)
    zhat = z / np.asarray(safe_r)[..., None]
    pz = np.sum(zhat * p, axis=-1)
    val = (2.0 * j0 - j2)[..., None] * p + (3.0 * j2 * pz)[..., None] * zhat
    val = (4.0 * np.pi / 3.0) * val
    limit = (8.0 * np.pi / 3.0) * p
    return np.where(np.asarray(tiny)[..., None], limit, val)


def norm_H_phi_sq(y_s, points, cell_volume: float, p, k: float) -> float:
    """Riemann sum of ``|H phi_{y_s}(x)|^2`` over cells ``points`` of equal volume."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) == 0:
        raise ValueError("region has no cells")
    v = closed_form_H_phi(np.asarray(y_s, float) - points, p, k)
    return float(cell_volume * np.sum(np.abs(v) ** 2))


# --- reciprocity -------------------------------------------------------------

def _match(nodes_a: np.ndarray, nodes_b: np.ndarray, what: str) -> np.ndarray:
    """Index into ``nodes_b`` of every node in ``nodes_a`` (same set, any order)."""
    dist, idx = cKDTree(nodes_b).query(nodes_a)
    if np.any(dist > 1e-12):
        raise ValueError(f"{what}: direction sets do not coincide")
    return idx


def _reciprocal_indices(data: FarFieldData) -> tuple:
    """Index maps realizing ``(xhat_i, d_j) -> (-d_j, -xhat_i)``.

    Returns ``(a, b)`` with ``obs[a[j]] == -inc[j]`` and ``inc[b[i]] == -obs[i]``.
    """
    if not data.has_full:
        raise ValueError("reciprocity needs full 3x3 far-field matrices")
    obs, inc = data.obs, data.inc
    if obs.antipodal_pairing is None or inc.antipodal_pairing is None:
        raise ValueError("reciprocity needs antipodally closed direction sets")
    if len(obs) != len(inc):
        raise ValueError("observation and incident sets differ in size")
    inc_in_obs = _match(inc.nodes, obs.nodes, "reciprocity")
    obs_in_inc = _match(obs.nodes, inc.nodes, "reciprocity")
    a = inc_in_obs[inc.antipodal_pairing]
    b = obs_in_inc[obs.antipodal_pairing]
    return a, b


def _reciprocal_partner(data: FarFieldData) -> np.ndarray:
    """``R[i, j] = u_inf(-d_j, -xhat_i)^T``."""
    a, b = _reciprocal_indices(data)
    U = data.full
    return np.swapaxes(U[a[None, :], b[:, None]], -1, -2)


def reciprocity_residual(data: FarFieldData) -> float:
    """``max ||u(xhat, d) - u(-d, -xhat)^T||_F / max ||u||_F`` over all pairs."""
    R = _reciprocal_partner(data)
    scale = np.max(np.linalg.norm(data.full, axis=(-2, -1)))
    if scale == 0:
        return 0.0
    return float(np.max(np.linalg.norm(data.full - R, axis=(-2, -1))) / scale)


def symmetrize_reciprocity(data: FarFieldData) -> FarFieldData:
    """Average each matrix with its reciprocal partner; polarized columns rebuilt."""
    R = _reciprocal_partner(data)
    full = 0.5 * (data.full + R)
    q = tangential_component(data.inc.nodes, data.p)
    pol = np.einsum("ijab,jb->ija", full, q)
    meta = dict(data.metadata, reciprocity_symmetrized=True)
    return replace(data, full=full, polarized=pol, metadata=meta)


def discrete_operator_norm(op, full: bool = False) -> float:
    """Largest singular value of the ``sqrt(w)``-scaled data matrix."""
    if isinstance(op, FarFieldData):
        op = FarFieldOperatorView(op)
    M = op.dense_matrix(full=full)
    if not np.any(M):
        return 0.0
    return float(np.linalg.norm(M, 2))


test_function_phi.__test__ = False  # keep pytest from collecting it on import
