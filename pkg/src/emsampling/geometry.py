"""Unit-sphere quadrature, tangential vector algebra and spherical Bessel functions.

Every integral over the unit sphere in this package is a weighted sum over a
:class:`DirectionSet`.  The default family is the spherical Fibonacci lattice
with equal weights ``4*pi/n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

FOUR_PI = 4.0 * np.pi
GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0

# Polarization vector used for all published reconstructions.
DEFAULT_POLARIZATION = np.array([1.0, -1.0, 1.0]) / np.sqrt(3.0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DirectionSet:
    """Quadrature nodes and weights on the unit sphere.

    Parameters
    ----------
    nodes : ndarray, shape (n, 3)
        Unit vectors.
    weights : ndarray, shape (n,)
        Positive weights (steradians) summing to ``4*pi``.
    antipodal_pairing : ndarray of int, shape (n,), optional
        Index map ``j -> j'`` with ``nodes[j'] == -nodes[j]``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    antipodal_pairing: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or len(nodes) == 0:
            raise ValueError("nodes must have shape (n, 3) with n >= 1")
        if weights.shape != (len(nodes),):
            raise ValueError("weights must have shape (n,)")
        if np.any(np.abs(np.linalg.norm(nodes, axis=1) - 1.0) > 1e-12):
            raise ValueError("direction nodes must be unit vectors")
        if np.any(weights <= 0.0):
            raise ValueError("quadrature weights must be strictly positive")
        if abs(weights.sum() - FOUR_PI) > 1e-10 * FOUR_PI:
            raise ValueError(
                f"quadrature weights sum to {weights.sum()!r}, expected 4*pi")
        pairing = self.antipodal_pairing
        if pairing is not None:
            pairing = np.asarray(pairing, dtype=np.intp)
            if pairing.shape != (len(nodes),):
                raise ValueError("antipodal_pairing must have shape (n,)")
            if np.any(nodes[pairing] != -nodes):
                raise ValueError("antipodal_pairing does not map nodes to antipodes")
            pairing = _frozen(pairing)
        object.__setattr__(self, "nodes", _frozen(nodes))
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "antipodal_pairing", pairing)

    def __len__(self) -> int:
        return len(self.nodes)

    def same_as(self, other: "DirectionSet") -> bool:
        """True if both sets carry bit-identical nodes and weights."""
        return (np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.weights, other.weights))


@dataclass(frozen=True)
class PolarizationConfig:
    """Fixed real vector ``p`` entering the incident fields and test functions."""

    p: tuple = tuple(DEFAULT_POLARIZATION)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("polarization must be a finite real 3-vector")
        if np.linalg.norm(p) == 0.0:
            raise ValueError("polarization vector must be nonzero")
        object.__setattr__(self, "p", tuple(float(v) for v in p))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.p)

    def normalized(self) -> "PolarizationConfig":
        v = self.vector
        return PolarizationConfig(tuple(v / np.linalg.norm(v)))


def fibonacci_directions(n: int) -> DirectionSet:
    """Spherical Fibonacci lattice with ``n`` nodes and equal weights."""
    if int(n) != n or n < 6:
        raise ValueError(f"need at least 6 directions, got {n!r}")
    n = int(n)
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    theta = 2.0 * np.pi * i / GOLDEN_RATIO
    rho = np.sqrt(1.0 - z * z)
    nodes = np.column_stack((rho * np.cos(theta), rho * np.sin(theta), z))
    nodes /= np.linalg.norm(nodes, axis=1, keepdims=True)
    return DirectionSet(nodes, np.full(n, FOUR_PI / n))


def antipodal_symmetrize(ds: DirectionSet) -> DirectionSet:
    """Close ``ds`` under ``d -> -d``.

    Node ``j`` of the input becomes node ``j`` of the output and its antipode
    is node ``j + n``; each weight is halved and carried by both.
    """
    n = len(ds)
    nodes = np.concatenate((ds.nodes, -ds.nodes))
    weights = np.concatenate((ds.weights, ds.weights)) / 2.0
    pairing = np.concatenate((np.arange(n, 2 * n), np.arange(n)))
    return DirectionSet(nodes, weights, pairing)


def tangential_component(d, p) -> np.ndarray:
    """``(d x p) x d = p - d (d . p)``; broadcasts over leading axes."""
    d = np.asarray(d, dtype=float)
    p = np.asarray(p, dtype=float)
    return p - d * np.sum(d * p, axis=-1, keepdims=True)


def _bessel_series(l: int, t: np.ndarray, nterms: int) -> np.ndarray:
    # j_l(t) = t^l sum_m (-t^2/2)^m / (m! (2l+2m+1)!!)
    coef = 1.0 / special.factorial2(2 * l + 1)
    term = np.full_like(t, coef)
    total = term.copy()
    u = -0.5 * t * t
    for m in range(1, nterms):
        term = term * u / (m * (2 * l + 2 * m + 1))
        total = total + term
    return total * t ** l


def spherical_bessel_j(l: int, t) -> np.ndarray | float:
    """Spherical Bessel function of the first kind ``j_l(t)`` for ``t >= 0``.

    Orders 0, 1 and 2 are evaluated from their closed forms, switching to the
    power series where the closed forms lose digits to cancellation.  Higher
    orders are delegated to :func:`scipy.special.spherical_jn`.
    """
    if int(l) != l or l < 0:
        raise ValueError(f"order must be a nonnegative integer, got {l!r}")
    l = int(l)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
        raise ValueError("spherical_bessel_j requires t >= 0")
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    if l > 2:
        out = special.spherical_jn(l, t_arr)
        return float(out[0]) if scalar else out

    # j0 has no cancellation; j1, j2 lose ~ (1/t)^(l+1) digits below t ~ 1
    cutoff = {0: 1e-4, 1: 0.5, 2: 1.0}[l]
    nterms = {0: 4, 1: 10, 2: 12}[l]
    out = np.empty_like(t_arr)
    small = t_arr < cutoff
    out[small] = _bessel_series(l, t_arr[small], nterms)
    tb = t_arr[~small]
    s, c = np.sin(tb), np.cos(tb)
    if l == 0:
        out[~small] = s / tb
    elif l == 1:
        out[~small] = s / tb ** 2 - c / tb
    else:
        out[~small] = (3.0 / tb ** 3 - 1.0 / tb) * s - 3.0 * c / tb ** 2
    return float(out[0]) if scalar else out


def funk_hecke_lhs(ds: DirectionSet, k: float, x) -> complex | np.ndarray:
    """Quadrature of ``int exp(-i k d.x) ds(d)``; tends to ``4 pi j0(k|x|)``.

    ``x`` may be a single point or an array of shape (..., 3).
    """
    x = np.asarray(x, dtype=float)
    phase = np.exp(-1j * k * (x @ ds.nodes.T))
    val = phase @ ds.weights
    return complex(val) if val.ndim == 0 else val
