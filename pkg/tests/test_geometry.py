import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orthoct.geometry import (
    GeometryError,
    Projection,
    Volume,
    back_project,
    denormalize,
    forward_project,
    normalize_volume,
    smear,
)


def test_projection_shapes_and_units():
    vol = Volume(np.ones((4, 5, 6)), (1.0, 2.0, 3.0))
    ap, lat = forward_project(vol, "AP"), forward_project(vol, "LAT")
    assert ap.dims == (4, 6) and lat.dims == (5, 6)
    # line integral of 1 HU over 5 voxels of 2 mm
    np.testing.assert_allclose(ap.values, 10.0)
    np.testing.assert_allclose(lat.values, 4.0)
    assert ap.pixel_spacing == (1.0, 3.0) and lat.pixel_spacing == (2.0, 3.0)


def test_projection_preserves_float32():
    vol = Volume(np.ones((4, 4, 4), np.float32), (2.8, 2.8, 2.8))
    assert forward_project(vol, "AP").values.dtype == np.float32


@given(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_projector_smear_adjoint(nx, ny, nz, seed):
    rng = np.random.default_rng(seed)
    spacing = tuple(rng.uniform(0.5, 3.0, 3))
    vol = Volume(rng.standard_normal((nx, ny, nz)), spacing)
    for axis in ("AP", "LAT"):
        proj = forward_project(vol, axis)
        p = Projection(axis, rng.standard_normal(proj.dims), proj.pixel_spacing)
        lhs = np.sum(proj.values * p.values)
        rhs = np.sum(vol.values * smear(p, vol.dims, spacing))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_back_project_constant_round_trip():
    vol = Volume(np.full((6, 5, 4), -300.0), (2.0, 1.5, 1.0))
    bp = back_project(forward_project(vol, "AP"), forward_project(vol, "LAT"), vol.dims, vol.spacing)
    np.testing.assert_allclose(bp.values, -300.0)


def test_back_project_requires_ap_then_lat():
    vol = Volume(np.zeros((4, 4, 4)))
    ap, lat = forward_project(vol, "AP"), forward_project(vol, "LAT")
    with pytest.raises(GeometryError):
        back_project(lat, ap, vol.dims, vol.spacing)


def test_back_project_dim_mismatch():
    ap = forward_project(Volume(np.zeros((4, 4, 4))), "AP")
    lat = forward_project(Volume(np.zeros((4, 4, 4))), "LAT")
    with pytest.raises(GeometryError):
        back_project(ap, lat, (4, 4, 5), (1, 1, 1))


def test_invalid_inputs():
    with pytest.raises(GeometryError):
        Volume(np.zeros((3, 3)))
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(GeometryError):
        Projection("PA", np.zeros((2, 2)))


def test_normalize_window_round_trip(rng):
    hu = rng.uniform(-1000, 1000, (5, 5))
    x = normalize_volume(hu)
    assert x.min() >= 0 and x.max() <= 1
    np.testing.assert_allclose(denormalize(x), hu, atol=1e-9)
    np.testing.assert_array_equal(normalize_volume(np.array([-2000.0, 3000.0])), [0.0, 1.0])
