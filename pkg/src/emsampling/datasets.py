"""Far-field data containers, noise injection and on-disk formats.

Two formats are supported:

``FFP1``
    Bit-exact little-endian binary container for :class:`FarFieldData`::

        offset  type             content
        0       4 bytes          magic b"FFP1"
        4       u32              flags (bit 0: full 3x3 matrices present)
        8       f64              wavenumber k
        16      3 x f64          polarization p
        40      u32, u32         N_obs, N_inc
        48      f64              noise level delta
        56      u64              noise seed (0 if absent)
        64      N_obs x 3 f64    observation nodes, then N_obs f64 weights
        ...     N_inc x 3 f64    incident nodes, then N_inc f64 weights
        ...     complex f64      polarized tensor (obs, inc, component),
                                 interleaved (re, im)
        ...     complex f64      full tensor (obs, inc, row, col), if flagged

Legacy VTK ``STRUCTURED_POINTS``
    ASCII volume files readable by ParaView, VisIt and the VTK readers.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import DirectionSet, tangential_component

MAGIC = b"FFP1"
_HEADER = struct.Struct("<4sId3dIIdQ")
FLAG_FULL = 1


class FormatError(ValueError):
    """Raised when an FFP file cannot be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class FarFieldData:
    """Far-field measurements for every (observation, incident) direction pair.

    ``polarized[i, j]`` is ``u_inf(xhat_i, d_j) q_j`` with
    ``q_j = (d_j x p) x d_j``; ``full[i, j]`` is the 3x3 matrix
    ``u_inf(xhat_i, d_j)``.  At least one of the two must be present.
    """

    k: float
    p: np.ndarray
    obs: DirectionSet
    inc: DirectionSet
    polarized: Optional[np.ndarray] = None
    full: Optional[np.ndarray] = None
    noise_level: float = 0.0
    seed: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.polarized is None and self.full is None:
            raise ValueError("FarFieldData needs a polarized or a full tensor")
        n_obs, n_inc = len(self.obs), len(self.inc)
        p = np.asarray(self.p, dtype=float)
        if p.shape != (3,):
            raise ValueError("p must be a 3-vector")
        object.__setattr__(self, "p", p)
        if self.polarized is not None:
            pol = np.asarray(self.polarized, dtype=complex)
            if pol.shape != (n_obs, n_inc, 3):
                raise ValueError(
                    f"polarized tensor has shape {pol.shape}, "
                    f"expected {(n_obs, n_inc, 3)}")
            object.__setattr__(self, "polarized", pol)
        if self.full is not None:
            full = np.asarray(self.full, dtype=complex)
            if full.shape != (n_obs, n_inc, 3, 3):
                raise ValueError(
                    f"full tensor has shape {full.shape}, "
                    f"expected {(n_obs, n_inc, 3, 3)}")
            object.__setattr__(self, "full", full)
        if self.noise_level < 0:
            raise ValueError("noise level must be nonnegative")

    @property
    def shape(self) -> tuple:
        return (len(self.obs), len(self.inc))

    @property
    def has_full(self) -> bool:
        return self.full is not None

    def polarized_tensor(self) -> np.ndarray:
        """Polarized columns, derived from the full matrices if needed."""
        if self.polarized is not None:
            return self.polarized
        q = tangential_component(self.inc.nodes, self.p)
        return np.einsum("ijab,jb->ija", self.full, q)

    def with_polarized(self) -> "FarFieldData":
        if self.polarized is not None:
            return self
        return replace(self, polarized=self.polarized_tensor())


@dataclass(frozen=True)
class NoiseSpec:
    delta: float
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.delta) or self.delta < 0:
            raise ValueError(f"noise level must be >= 0, got {self.delta!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def noise_matrices(shape: tuple, seed: int) -> np.ndarray:
    """Three complex noise matrices uniform on the square ``|re|, |im| <= 1``.

    Draws come from a Philox4x64 counter-based generator keyed by ``seed``.
    The stream is consumed component by component; within a component the
    matrix is traversed row-major and each entry takes its real part before
    its imaginary part.
    """
    rng = np.random.Generator(np.random.Philox(int(seed)))
    out = np.empty((3,) + tuple(shape), dtype=complex)
    for n in range(3):
        u = rng.uniform(-1.0, 1.0, size=tuple(shape) + (2,))
        out[n] = u[..., 0] + 1j * u[..., 1]
    return out


def add_noise(data: FarFieldData, spec: NoiseSpec) -> FarFieldData:
    """Perturb each Cartesian component matrix ``D_n`` by ``delta ||D_n||_2 N/||N||_2``."""
    if data.polarized is None:
        raise ValueError("noise is defined on the polarized tensor; "
                         "derive it with FarFieldData.with_polarized() first")
    if spec.delta == 0:
        return replace(data, polarized=data.polarized.copy(),
                       noise_level=0.0, seed=int(spec.seed))
    noisy = data.polarized.copy()
    noise = noise_matrices(data.shape, spec.seed)
    for n in range(3):
        d_norm = np.linalg.norm(data.polarized[..., n], 2)
        n_norm = np.linalg.norm(noise[n], 2)
        noisy[..., n] = data.polarized[..., n] + spec.delta * d_norm / n_norm * noise[n]
    meta = dict(data.metadata, noise_matrices="independent per component")
    # full matrices no longer describe the noisy polarized columns
    return replace(data, polarized=noisy, full=None, noise_level=float(spec.delta),
                   seed=int(spec.seed), metadata=meta)


def _atomic_write(path, payload: bytes | str, mode: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _complex_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<c16").tobytes()


def encode_ffp(data: FarFieldData) -> bytes:
    flags = FLAG_FULL if data.has_full else 0
    n_obs, n_inc = data.shape
    header = _HEADER.pack(MAGIC, flags, float(data.k), *map(float, data.p),
                          n_obs, n_inc, float(data.noise_level),
                          int(data.seed or 0))
    parts = [header]
    for ds in (data.obs, data.inc):
        parts.append(np.ascontiguousarray(ds.nodes, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(ds.weights, dtype="<f8").tobytes())
    parts.append(_complex_bytes(data.polarized_tensor()))
    if data.has_full:
        parts.append(_complex_bytes(data.full))
    return b"".join(parts)


def write_ffp(data: FarFieldData, path) -> None:
    _atomic_write(path, encode_ffp(data), "wb")


def decode_ffp(buf: bytes) -> FarFieldData:
    if len(buf) < 4:
        raise FormatError("truncated file: missing magic", len(buf))
    magic = bytes(buf[:4])
    if magic != MAGIC:
        if magic[:3] == b"FFP":
            raise FormatError(f"unsupported version {magic!r}", 0)
        raise FormatError(f"bad magic {magic!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, flags, k, p0, p1, p2, n_obs, n_inc, delta, seed = _HEADER.unpack_from(buf, 0)
    for name, value, offset in (("k", k, 8), ("p", p0, 16), ("p", p1, 24),
                                ("p", p2, 32), ("delta", delta, 48)):
        if not np.isfinite(value):
            raise FormatError(f"non-finite {name} in header", offset)
    if flags & ~FLAG_FULL:
        raise FormatError(f"unknown flags {flags:#x}", 4)
    if n_obs == 0 or n_inc == 0:
        raise FormatError("empty direction set", 40)

    pos = _HEADER.size

    def take(count, dtype, what):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated {what}", len(buf))
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
        pos += nbytes
        return arr

    sets = []
    for label, n in (("observation", n_obs), ("incident", n_inc)):
        start = pos
        nodes = take(3 * n, "<f8", f"{label} nodes").reshape(n, 3)
        weights = take(n, "<f8", f"{label} weights")
        try:
            sets.append(DirectionSet(nodes, weights))
        except ValueError as exc:
            raise FormatError(f"invalid {label} directions: {exc}", start) from None
    polarized = take(n_obs * n_inc * 3, "<c16", "polarized tensor").reshape(n_obs, n_inc, 3)
    full = None
    if flags & FLAG_FULL:
        full = take(n_obs * n_inc * 9, "<c16", "full tensor").reshape(n_obs, n_inc, 3, 3)
    if pos != len(buf):
        raise FormatError("trailing bytes after tensor data", pos)
    return FarFieldData(k=k, p=np.array([p0, p1, p2]), obs=sets[0], inc=sets[1],
                        polarized=polarized, full=full, noise_level=delta,
                        seed=seed if seed else None)


def read_ffp(path) -> FarFieldData:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_ffp(buf)


def format_volume(vol) -> str:
    g = vol.grid
    values = np.asarray(vol.values, dtype=float)
    lines = [
        "# vtk DataFile Version 3.0",
        f"emsampling {vol.method} imaging functional",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS {} {} {}".format(*g.dims),
        "ORIGIN {:.17g} {:.17g} {:.17g}".format(*g.origin),
        "SPACING {0:.17g} {0:.17g} {0:.17g}".format(g.spacing),
        f"POINT_DATA {values.size}",
        f"SCALARS {vol.method.lower()} double 1",
        "LOOKUP_TABLE default",
    ]
    # VTK point order: x fastest, then y, then z
    flat = values.transpose(2, 1, 0).ravel()
    lines.extend(f"{v:.16e}" for v in flat)
    return "\n".join(lines) + "\n"


def write_volume(vol, path) -> None:
    try:
        _atomic_write(path, format_volume(vol), "w")
    except OSError as exc:
        raise OSError(f"cannot write volume to {os.fspath(path)!r}: {exc}") from exc
