import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from lvct.losses import psnr
from lvct.phantom import (
    GRID_MAGIC,
    SHEPP_LOGAN_ELLIPSES,
    DatasetSplit,
    EllipsoidSpec,
    GridDimensionError,
    GridFormatError,
    GridTruncatedError,
    SliceVolume,
    ellipse_value,
    export_pgm,
    load_grid,
    render_ellipsoids,
    save_grid,
    shepp_logan,
    split_cases,
    volume_phantom,
)

# ---------------------------------------------------------------- Shepp-Logan


def test_shepp_logan_range_and_outside():
    img = shepp_logan(128)
    assert img.shape == (128, 128)
    assert img.min() == 0.0 and img.max() <= 1.0
    assert img[0, 0] == 0.0 and img[-1, -1] == 0.0 and img[64, 0] == 0.0


def test_shepp_logan_rejects_small():
    with pytest.raises(ValueError):
        shepp_logan(31)


def test_shepp_logan_center_pixel_matches_analytic_sum():
    # odd size puts a pixel centre exactly at the origin
    img = shepp_logan(129)
    covering = 0.0
    for value, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        t = np.deg2rad(phi)
        u = -x0 * np.cos(t) - y0 * np.sin(t)
        v = x0 * np.sin(t) - y0 * np.cos(t)
        if (u / a) ** 2 + (v / b) ** 2 <= 1:
            covering += value
    assert img[64, 64] == pytest.approx(covering, abs=1e-12)
    assert covering == pytest.approx(0.2)


def _grid(n):
    coords = (2.0 * np.arange(n) - (n - 1)) / n
    return np.meshgrid(coords, coords[::-1])


AXIAL = [e for e in SHEPP_LOGAN_ELLIPSES if e[3] == 0.0 and e[5] == 0.0]
OFF_AXIS = [e for e in SHEPP_LOGAN_ELLIPSES if e not in AXIAL]


def test_shepp_logan_axial_ellipses_are_mirror_symmetric():
    x, y = _grid(65)
    img = ellipse_value(x, y, AXIAL)
    assert np.max(np.abs(img - img[:, ::-1])) <= 1e-12


def test_shepp_logan_asymmetry_confined_to_off_axis_ellipses():
    # the standard table's off-axis ellipses are not mirror pairs (different
    # semi-axes left and right), so the full image is only symmetric away
    # from them
    n = 129
    img = shepp_logan(n)
    x, y = _grid(n)
    support = np.zeros(x.shape, bool)
    for e in OFF_AXIS:
        support |= ellipse_value(x, y, [(1.0,) + tuple(e[1:])]) != 0
    support |= support[:, ::-1]
    diff = np.abs(img - img[:, ::-1])
    assert np.max(diff[~support]) <= 1e-12
    assert np.max(diff[support]) > 0


def test_ellipse_value_outside_everything_is_zero():
    assert ellipse_value(0.99, 0.99) == 0.0


# ---------------------------------------------------------------- volumes


def test_volume_is_seed_deterministic():
    a = volume_phantom(6, 32, seed=5)
    b = volume_phantom(6, 32, seed=5)
    c = volume_phantom(6, 32, seed=6)
    assert a.slices.tobytes() == b.slices.tobytes()
    assert a.slices.tobytes() != c.slices.tobytes()


def test_volume_needs_five_slices():
    with pytest.raises(ValueError):
        volume_phantom(4, 32)
    with pytest.raises(ValueError):
        SliceVolume(np.zeros((4, 8, 8)))


def test_ellipsoid_spec_rejects_non_positive_axes():
    with pytest.raises(ValueError):
        EllipsoidSpec((0, 0, 0), (1, 0, 1))


def test_single_ellipsoid_cross_section_radius():
    a, c, z0 = 20.0, 6.0, 8.0
    spec = EllipsoidSpec((0.0, 0.0, z0), (a, a, c), 0.0, 1.0)
    vol = render_ellipsoids([spec], 17, 64)
    ax = np.arange(64) - 31.5
    for z in (8, 10, 12):
        r = a * np.sqrt(1 - (z - z0) ** 2 / c**2)
        row = vol[z, 31]  # y = -0.5, nearly through the centre
        inside = np.abs(ax[row > 0])
        # half-width of the chord at y=-0.5 versus the analytic radius
        expected = np.sqrt(max(r * r - 0.25, 0))
        assert inside.max() <= expected + 1e-9
        assert inside.max() > expected - 1.0
    assert not vol[15].any()


def test_adjacent_slices_more_similar_than_distant():
    near, far = [], []
    for seed in range(20):
        v = volume_phantom(12, 32, seed=seed).slices
        near.append(psnr(v[1], v[0]))
        far.append(psnr(v[11], v[0]))
    assert np.mean(near) > np.mean(far)


def test_volume_continuity_invariant():
    v = volume_phantom(10, 32, seed=2).slices
    mad = np.abs(np.diff(v, axis=0)).mean(axis=(1, 2))
    assert np.all(mad < v.max() - v.min())


# ---------------------------------------------------------------- splits


def test_split_cases_disjoint():
    s = split_cases([f"c{i}" for i in range(10)], n_test=2, n_val=3)
    assert s.test == ["c0", "c1"] and s.val == ["c2", "c3", "c4"] and len(s.train) == 5
    with pytest.raises(ValueError):
        DatasetSplit(train=["a"], val=["a"], test=[])


# ---------------------------------------------------------------- grid files


def test_grid_roundtrip_512x180(tmp_path):
    g = np.random.default_rng(0).standard_normal((512, 180)).astype(np.float32)
    save_grid(tmp_path / "g.grid", g)
    back = load_grid(tmp_path / "g.grid")
    assert back.dtype == np.float32 and back.shape == (512, 180)
    assert back.tobytes() == g.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=1, max_dims=4, max_side=6),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_grid_roundtrip_property(tmp_path_factory, g):
    p = tmp_path_factory.mktemp("grid") / "x.grid"
    save_grid(p, g)
    back = load_grid(p)
    assert back.shape == g.shape
    assert back.tobytes() == g.tobytes()


def test_grid_header_layout(tmp_path):
    save_grid(tmp_path / "h.grid", np.zeros((2, 3), np.float32))
    raw = (tmp_path / "h.grid").read_bytes()
    assert raw[:6] == GRID_MAGIC
    assert struct.unpack("<3I", raw[6:18]) == (2, 2, 3)
    assert len(raw) == 18 + 24


def test_grid_truncated_raises(tmp_path):
    p = tmp_path / "t.grid"
    save_grid(p, np.ones((4, 4), np.float32))
    raw = p.read_bytes()
    for cut in (3, 8, 12, len(raw) - 1):
        p.write_bytes(raw[:cut])
        with pytest.raises(GridTruncatedError):
            load_grid(p)


def test_grid_bad_magic_and_trailing_bytes(tmp_path):
    p = tmp_path / "m.grid"
    p.write_bytes(b"NOTAGRID" + bytes(32))
    with pytest.raises(GridFormatError):
        load_grid(p)
    save_grid(p, np.ones(3, np.float32))
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(GridFormatError):
        load_grid(p)


def test_grid_dimension_overflow(tmp_path):
    p = tmp_path / "d.grid"
    p.write_bytes(GRID_MAGIC + struct.pack("<3I", 2, 1 << 20, 1 << 20))
    with pytest.raises(GridDimensionError):
        load_grid(p)
    p.write_bytes(GRID_MAGIC + struct.pack("<I", 99))
    with pytest.raises(GridDimensionError):
        load_grid(p)


def test_grid_error_codes_are_distinct():
    codes = {GridFormatError.code, GridTruncatedError.code, GridDimensionError.code}
    assert len(codes) == 3


def test_save_grid_rejects_nan(tmp_path):
    with pytest.raises(ValueError):
        save_grid(tmp_path / "n.grid", np.array([np.nan]))
    assert not (tmp_path / "n.grid").exists()


# ---------------------------------------------------------------- PGM


def read_pgm(path):
    raw = path.read_bytes()
    header, rest = raw[:raw.index(b"255\n") + 4], raw[raw.index(b"255\n") + 4:]
    return header, np.frombuffer(rest, np.uint8)


def test_pgm_header_and_range(tmp_path):
    img = np.arange(12, dtype=float).reshape(3, 4)
    export_pgm(img, tmp_path / "a.pgm")
    header, pix = read_pgm(tmp_path / "a.pgm")
    assert header == b"P5\n4 3\n255\n"
    assert pix.min() == 0 and pix.max() == 255
    assert pix[0] == 0 and pix[-1] == 255


def test_pgm_constant_is_mid_gray(tmp_path):
    export_pgm(np.full((5, 5), 3.3), tmp_path / "c.pgm")
    _, pix = read_pgm(tmp_path / "c.pgm")
    assert np.all(pix == 128)
