import os
import struct

import meshio
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emsampling.datasets import (FarFieldData, FormatError, NoiseSpec, add_noise, decode_ffp,
                                 encode_ffp, format_volume, noise_matrices, read_ffp, write_ffp,
                                 write_volume)
from emsampling.geometry import DEFAULT_POLARIZATION, antipodal_symmetrize, fibonacci_directions
from emsampling.imaging import ImagingVolume, SamplingGrid


def random_data(n_obs=7, n_inc=9, full=False, seed=0):
    rng = np.random.default_rng(seed)
    obs, inc = fibonacci_directions(n_obs), fibonacci_directions(n_inc)
    pol = rng.normal(size=(n_obs, n_inc, 3)) + 1j * rng.normal(size=(n_obs, n_inc, 3))
    mats = None
    if full:
        mats = rng.normal(size=(n_obs, n_inc, 3, 3)) + 1j * rng.normal(size=(n_obs, n_inc, 3, 3))
    return FarFieldData(8.0, DEFAULT_POLARIZATION, obs, inc, polarized=pol, full=mats)


# --- FarFieldData -------------------------------------------------------------

def test_far_field_data_shapes():
    with pytest.raises(ValueError, match="shape"):
        FarFieldData(1.0, DEFAULT_POLARIZATION, fibonacci_directions(6), fibonacci_directions(7),
                     polarized=np.zeros((6, 6, 3)))
    with pytest.raises(ValueError, match="polarized or a full"):
        FarFieldData(1.0, DEFAULT_POLARIZATION, fibonacci_directions(6), fibonacci_directions(6))


def test_polarized_derived_from_full():
    d = random_data(full=True)
    only_full = FarFieldData(d.k, d.p, d.obs, d.inc, full=d.full)
    q = DEFAULT_POLARIZATION - d.inc.nodes * (d.inc.nodes @ DEFAULT_POLARIZATION)[:, None]
    expected = np.einsum("ijab,jb->ija", d.full, q)
    np.testing.assert_allclose(only_full.polarized_tensor(), expected, rtol=1e-15)
    assert only_full.with_polarized().polarized is not None


def test_synthetic_data_tangential(small_data):
    D = small_data.polarized
    normal = np.abs(np.einsum("ia,ija->ij", small_data.obs.nodes, D))
    assert normal.max() <= 1e-10 * np.abs(D).max()


# --- noise --------------------------------------------------------------------

def test_noise_zero_delta_is_bit_identical():
    d = random_data()
    out = add_noise(d, NoiseSpec(0.0, 3))
    assert out.polarized.tobytes() == d.polarized.tobytes()
    assert out.polarized is not d.polarized


@pytest.mark.parametrize("delta", [0.01, 0.3, 0.6, 0.9, 2.0])
@pytest.mark.parametrize("seed", [0, 1, 2 ** 64 - 1])
def test_noise_norm_equality(delta, seed):
    d = random_data(seed=seed % 97)
    out = add_noise(d, NoiseSpec(delta, seed))
    for n in range(3):
        gap = np.linalg.norm(out.polarized[..., n] - d.polarized[..., n], 2)
        assert gap / np.linalg.norm(d.polarized[..., n], 2) == pytest.approx(delta, rel=1e-12)
    assert out.noise_level == delta and out.seed == seed
    assert out.full is None


def test_noise_deterministic_and_seed_dependent():
    d = random_data()
    a = add_noise(d, NoiseSpec(0.3, 11))
    b = add_noise(d, NoiseSpec(0.3, 11))
    c = add_noise(d, NoiseSpec(0.3, 12))
    assert a.polarized.tobytes() == b.polarized.tobytes()
    assert not np.array_equal(a.polarized, c.polarized)


def test_noise_matrices_square_and_independent():
    N = noise_matrices((40, 50), 5)
    assert N.shape == (3, 40, 50)
    assert np.all(np.abs(N.real) <= 1) and np.all(np.abs(N.imag) <= 1)
    assert not np.array_equal(N[0], N[1])
    # stream order: component, then row-major entries, real before imaginary
    rng = np.random.Generator(np.random.Philox(5))
    first = rng.uniform(-1, 1, size=(40, 50, 2))
    np.testing.assert_array_equal(N[0], first[..., 0] + 1j * first[..., 1])


@pytest.mark.parametrize("delta", [-0.1, float("nan"), float("inf")])
def test_noise_spec_rejects_bad_delta(delta):
    with pytest.raises(ValueError):
        NoiseSpec(delta)


def test_noise_needs_polarized_tensor():
    d = random_data(full=True)
    with pytest.raises(ValueError, match="polarized"):
        add_noise(FarFieldData(d.k, d.p, d.obs, d.inc, full=d.full), NoiseSpec(0.1))


# --- FFP1 -------------------------------------------------------------------

@pytest.mark.parametrize("full", [False, True])
def test_ffp_round_trip_bit_exact(tmp_path, full):
    d = add_noise(random_data(full=False), NoiseSpec(0.3, 77)) if not full else random_data(full=True)
    path = tmp_path / "data.ffp"
    write_ffp(d, path)
    back = read_ffp(path)
    assert back.k == d.k and np.array_equal(back.p, d.p)
    assert back.noise_level == d.noise_level and back.seed == d.seed
    for a, b in ((back.obs, d.obs), (back.inc, d.inc)):
        assert a.nodes.tobytes() == b.nodes.tobytes()
        assert a.weights.tobytes() == b.weights.tobytes()
    assert back.polarized_tensor().tobytes() == d.polarized_tensor().tobytes()
    if full:
        assert back.full.tobytes() == d.full.tobytes()
    assert encode_ffp(back) == path.read_bytes()


def test_ffp_header_layout():
    d = random_data(n_obs=6, n_inc=8, full=True)
    buf = encode_ffp(d)
    magic, flags, k = struct.unpack_from("<4sId", buf, 0)
    assert (magic, flags, k) == (b"FFP1", 1, 8.0)
    assert struct.unpack_from("<3d", buf, 16) == tuple(DEFAULT_POLARIZATION)
    assert struct.unpack_from("<II", buf, 40) == (6, 8)
    n_dir = (6 + 8) * 4 * 8
    assert len(buf) == 64 + n_dir + 6 * 8 * 3 * 16 + 6 * 8 * 9 * 16
    # first polarized entry: real then imaginary part
    re, im = struct.unpack_from("<2d", buf, 64 + n_dir)
    assert complex(re, im) == d.polarized[0, 0, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(6, 12), st.integers(6, 12), st.booleans(),
       st.floats(0, 5), st.integers(0, 2 ** 64 - 1))
def test_ffp_round_trip_property(n_obs, n_inc, full, delta, seed):
    d = random_data(n_obs, n_inc, full, seed % 1000)
    d = FarFieldData(d.k, d.p, d.obs, d.inc, d.polarized, d.full, delta, seed or None)
    assert encode_ffp(decode_ffp(encode_ffp(d))) == encode_ffp(d)


def test_ffp_antipodal_weights_round_trip():
    ds = antipodal_symmetrize(fibonacci_directions(9))
    d = FarFieldData(3.0, DEFAULT_POLARIZATION, ds, ds, polarized=np.ones((18, 18, 3)))
    back = decode_ffp(encode_ffp(d))
    assert back.inc.weights.tobytes() == ds.weights.tobytes()


@pytest.mark.parametrize("cut", [0, 3, 10, 63, 64, 100, -1])
def test_ffp_truncated(cut):
    buf = encode_ffp(random_data())
    with pytest.raises(FormatError) as info:
        decode_ffp(buf[:cut])
    assert "truncated" in str(info.value)
    assert info.value.offset <= len(buf)


def test_ffp_unsupported_version():
    buf = b"FFP2" + encode_ffp(random_data())[4:]
    with pytest.raises(FormatError, match="unsupported version") as info:
        decode_ffp(buf)
    assert info.value.offset == 0


def test_ffp_bad_magic():
    with pytest.raises(FormatError, match="bad magic"):
        decode_ffp(b"XXXX" + encode_ffp(random_data())[4:])


@pytest.mark.parametrize("offset, name", [(8, "k"), (24, "p"), (48, "delta")])
def test_ffp_nan_in_header(offset, name):
    buf = bytearray(encode_ffp(random_data()))
    struct.pack_into("<d", buf, offset, float("nan"))
    with pytest.raises(FormatError, match=f"non-finite {name}") as info:
        decode_ffp(bytes(buf))
    assert info.value.offset == offset


def test_ffp_trailing_and_flags():
    buf = encode_ffp(random_data())
    with pytest.raises(FormatError, match="trailing"):
        decode_ffp(buf + b"\0")
    bad = bytearray(buf)
    struct.pack_into("<I", bad, 4, 6)
    with pytest.raises(FormatError, match="flags"):
        decode_ffp(bytes(bad))


def test_ffp_invalid_weights_reported():
    buf = bytearray(encode_ffp(random_data()))
    struct.pack_into("<d", buf, 64 + 7 * 3 * 8, -1.0)
    with pytest.raises(FormatError, match="observation"):
        decode_ffp(bytes(buf))


def test_write_is_atomic(tmp_path, monkeypatch):
    path = tmp_path / "out.ffp"
    path.write_bytes(b"old")

    def boom(*args):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        write_ffp(random_data(), path)
    assert path.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["out.ffp"]


# --- volumes --------------------------------------------------------------------

def read_volume_text(text):
    """Minimal test-only reader for the legacy structured-points files."""
    lines = text.splitlines()
    header = {}
    for line in lines[:10]:
        parts = line.split()
        if parts and parts[0] in ("DIMENSIONS", "ORIGIN", "SPACING", "POINT_DATA"):
            header[parts[0]] = parts[1:]
    dims = tuple(int(v) for v in header["DIMENSIONS"])
    values = np.array([float(v) for v in lines[10:]])
    return header, values.reshape(dims[::-1]).transpose(2, 1, 0)


def test_volume_of_ones(tmp_path):
    vol = ImagingVolume(SamplingGrid((0, 0, 0), 1.0, (2, 2, 2)), np.ones((2, 2, 2)), "OSM")
    text = format_volume(vol)
    data_lines = text.splitlines()[10:]
    assert len(data_lines) == 8
    assert all(line == "1.0000000000000000e+00" for line in data_lines)
    assert "DATASET STRUCTURED_POINTS" in text


def test_volume_text_round_trip(tmp_path, rng):
    grid = SamplingGrid((-0.3, 0.25, 1.0), 0.125, (3, 4, 5))
    vals = rng.random((3, 4, 5)) * 10.0 ** rng.integers(-5, 5, (3, 4, 5))
    path = tmp_path / "v.vtk"
    write_volume(ImagingVolume(grid, vals, "DSM2"), path)
    header, back = read_volume_text(path.read_text())
    assert header["DIMENSIONS"] == ["3", "4", "5"]
    assert int(header["POINT_DATA"][0]) == 60
    np.testing.assert_allclose(back, vals, rtol=1e-15, atol=0)


def test_volume_parses_with_meshio(tmp_path, rng):
    grid = SamplingGrid((0.1, 0.2, 0.3), 0.5, (2, 3, 4))
    vals = rng.random((2, 3, 4))
    path = tmp_path / "v.vtk"
    write_volume(ImagingVolume(grid, vals, "OSM"), path)
    mesh = meshio.read(path)
    np.testing.assert_allclose(mesh.points, grid.points().reshape(2, 3, 4, 3)
                               .transpose(2, 1, 0, 3).reshape(-1, 3), rtol=1e-15)
    np.testing.assert_allclose(np.asarray(mesh.point_data["osm"]).ravel(),
                               vals.transpose(2, 1, 0).ravel(), rtol=1e-15)


def test_volume_write_error_names_path(tmp_path):
    vol = ImagingVolume(SamplingGrid((0, 0, 0), 1.0, (1, 1, 1)), np.ones(1), "OSM")
    bad = tmp_path / "missing" / "v.vtk"
    with pytest.raises(OSError, match="missing"):
        write_volume(vol, bad)
