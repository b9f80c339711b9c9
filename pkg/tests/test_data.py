import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from orthoct.data import (
    BadMagicError,
    ByteCountMismatchError,
    DatasetManifest,
    PhantomSpec,
    TruncatedPayloadError,
    generate_phantom,
    load_projection,
    load_volume,
    render_phantom,
    resample,
    save_projection,
    save_volume,
    split_dataset,
)
from orthoct.geometry import HU_MAX, HU_MIN, Volume, forward_project


def test_phantom_deterministic():
    a = generate_phantom(PhantomSpec(seed=3))
    b = generate_phantom(PhantomSpec(seed=3))
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_phantom(PhantomSpec(seed=4)).values)


@pytest.mark.parametrize("seed", range(20))
def test_phantom_anatomy(seed):
    vol, masks = render_phantom(PhantomSpec(seed=seed))
    v = vol.values
    assert v.min() >= HU_MIN and v.max() <= HU_MAX
    lung = (v < -300) & masks["body"]
    assert lung.any()
    _, n = ndimage.label(lung)
    assert n >= 2
    assert not np.any(masks["lung"] & masks["spine"])
    # three separated modes: air/lung, soft tissue, bone
    assert np.sum(v < -600) > 0
    assert np.sum((v > -100) & (v < 100)) > 0.1 * v.size
    assert np.sum(v > 300) > 0


def test_phantom_spec_rejects_out_of_range():
    with pytest.raises(ValueError):
        PhantomSpec(body_hu=(0.0, 5000.0))


def test_volume_round_trip(tmp_path, rng):
    vol = Volume(rng.standard_normal((3, 4, 5)).astype(np.float32), (0.7, 1.1, 2.8))
    save_volume(vol, tmp_path / "v.vol")
    back = load_volume(tmp_path / "v.vol")
    assert back.values.tobytes() == vol.values.tobytes()
    assert back.spacing == vol.spacing


def test_projection_round_trip(tmp_path, phantom):
    proj = forward_project(phantom[0], "LAT")
    save_projection(proj, tmp_path / "p.proj")
    back = load_projection(tmp_path / "p.proj")
    assert back.axis == "LAT" and back.values.tobytes() == proj.values.tobytes()


def test_format_errors_are_distinct(tmp_path):
    vol = Volume(np.zeros((2, 2, 2), np.float32))
    path = tmp_path / "v.vol"
    save_volume(vol, path)
    raw = path.read_bytes()

    (tmp_path / "magic.vol").write_bytes(b"NOT-A-VOLUME\n" + raw)
    with pytest.raises(BadMagicError):
        load_volume(tmp_path / "magic.vol")

    (tmp_path / "trunc.vol").write_bytes(raw[:-2])
    with pytest.raises(TruncatedPayloadError):
        load_volume(tmp_path / "trunc.vol")

    (tmp_path / "noend.vol").write_bytes(raw[:20])
    with pytest.raises(TruncatedPayloadError):
        load_volume(tmp_path / "noend.vol")

    # header says 2x2x2 but only 7 floats follow
    (tmp_path / "short.vol").write_bytes(raw[:-4])
    with pytest.raises(ByteCountMismatchError):
        load_volume(tmp_path / "short.vol")


def test_resample_identity_and_constant(phantom):
    vol = phantom[0]
    same = resample(vol, vol.dims, vol.spacing)
    np.testing.assert_array_equal(same.values, vol.values)
    const = Volume(np.full((8, 8, 8), 42.0), (1.0, 1.0, 1.0))
    out = resample(const, (5, 11, 3), (1.7, 0.6, 2.5))
    np.testing.assert_allclose(out.values, 42.0)


def test_resample_linear_ramp_half_resolution():
    n, s = 16, 1.0
    centers = (np.arange(n) - (n - 1) / 2) * s
    ramp = np.broadcast_to((3.0 * centers + 5.0)[:, None, None], (n, 4, 4)).copy()
    out = resample(Volume(ramp, (s, s, s)), (8, 4, 4), (2 * s, s, s))
    new_centers = (np.arange(8) - 3.5) * 2 * s
    np.testing.assert_allclose(out.values[:, 0, 0], 3.0 * new_centers + 5.0, atol=1e-10)


def test_split_counts_and_partition():
    m = split_dataset(1009, 0.801, seed=0)
    assert len(m.train) == 808 and len(m.test) == 201
    assert set(m.train).isdisjoint(m.test)
    assert set(m.train) | set(m.test) == {str(i) for i in range(1009)}


@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_properties(n, frac, seed):
    m = split_dataset(n, frac, seed)
    assert len(m.train) == int(round(n * frac))
    assert sorted(m.train + m.test, key=int) == [str(i) for i in range(n)]
    assert m.train == split_dataset(n, frac, seed).train


def test_manifest_round_trip(tmp_path):
    m = split_dataset([f"v{i}.vol" for i in range(10)], 0.8, 5)
    m.save(tmp_path / "manifest.csv")
    back = DatasetManifest.load(tmp_path / "manifest.csv")
    assert back == m
