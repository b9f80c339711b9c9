import numpy as np
import pytest

from orthoct.autodiff import ShapeError, Tensor, check_gradients, tsum
from orthoct.networks import (
    ConfigError,
    UNetConfig,
    build_discriminator,
    build_unet,
    desk_config,
    disc_forward,
    feature_config,
    feature_forward,
    paper_config,
    unet_forward,
)

# counted layer by layer with the independent formula below, then pinned
DESK_2D_PARAMS = 121033
DESK_3D_PARAMS = 350809


def count_unet(dims, sched, cin=1, cout=1):
    k = 3**dims
    n, c = 0, cin
    for w in sched:
        n += c * w * k + 2 * w + w * w * k + 2 * w  # two bias-free convs + two norms
        c = w
    for lvl in range(len(sched) - 2, -1, -1):
        d, w = sched[lvl + 1], sched[lvl]
        n += d * w * 2**dims + w  # transposed conv with bias
        n += 2 * w * w * k + 2 * w + w * w * k + 2 * w
    return n + sched[0] * cout + cout


def test_param_count_regression():
    assert count_unet(2, (8, 16, 32, 64)) == DESK_2D_PARAMS
    assert build_unet(desk_config(2), 0).num_parameters() == DESK_2D_PARAMS
    assert build_unet(desk_config(3), 0).num_parameters() == DESK_3D_PARAMS


def test_paper_config_widths():
    cfg = paper_config(3)
    assert cfg.levels == 5 and cfg.channel_schedule == (64, 128, 256, 512, 1024)
    assert count_unet(3, cfg.widths) > 0


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(levels=1)
    with pytest.raises(ConfigError):
        UNetConfig(levels=3, channel_schedule=(8, 8, 16))
    with pytest.raises(ConfigError):
        UNetConfig(levels=2, channel_schedule=(8,))
    with pytest.raises(ConfigError):
        UNetConfig(upsample_mode="nearest")


def test_same_seed_same_params():
    a, b = build_unet(desk_config(2), 5), build_unet(desk_config(2), 5)
    assert list(a) == list(b)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    c = build_unet(desk_config(2), 6)
    a.check_compatible(c)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_unet_3d_shape_contract():
    cfg = desk_config(3)
    p = build_unet(cfg, 0)
    out = unet_forward(p, cfg, Tensor(np.zeros((1, 1, 32, 32, 32), np.float32)))
    assert out.shape == (1, 1, 32, 32, 32)


@pytest.mark.parametrize("mode", ["transposed_conv", "linear_interp"])
def test_unet_2d_shapes_and_determinism(mode, rng):
    cfg = desk_config(2, upsample_mode=mode)
    p = build_unet(cfg, 1)
    x = Tensor(rng.standard_normal((3, 1, 16, 24)).astype(np.float32))
    a, b = unet_forward(p, cfg, x), unet_forward(p, cfg, x)
    assert a.shape == (3, 1, 16, 24)
    assert a.data.tobytes() == b.data.tobytes()


def test_unet_rejects_indivisible_extent():
    cfg = desk_config(2)
    with pytest.raises(ShapeError):
        unet_forward(build_unet(cfg, 0), cfg, Tensor(np.zeros((1, 1, 20, 16))))


def test_residual_unet_starts_as_identity(rng):
    cfg = desk_config(2, residual=True)
    x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    out = unet_forward(build_unet(cfg, 0), cfg, Tensor(x))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("seed", range(2))
def test_unet_gradcheck(seed):
    cfg = UNetConfig(dims=2, levels=2, base_channels=2)
    p = build_unet(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 1, 8, 8)))
    w = rng.standard_normal((1, 1, 8, 8))
    err = check_gradients(lambda: tsum(unet_forward(p, cfg, x) * Tensor(w)), list(p.values()), samples=4, rng=rng)
    assert err < 1e-3


def test_feature_bundle_contract(rng):
    cfg = feature_config(desk_config(2))
    p = build_unet(cfg, 0)
    x = Tensor(rng.random((4, 1, 32, 32)).astype(np.float32))
    fb = feature_forward(p, cfg, x)
    assert fb.semantic.shape == (4, 32, 4, 4)
    assert fb.anatomy.shape == (4, 32, 32, 32)
    for t in (fb.semantic, fb.anatomy):
        np.testing.assert_allclose(np.linalg.norm(t.data, axis=1), 1.0, atol=1e-5)
    assert fb.min_raw_norm > 1e-8
    again = feature_forward(p, cfg, x)
    assert again.semantic.data.tobytes() == fb.semantic.data.tobytes()


def test_feature_forward_rejects_wrong_flags():
    cfg = desk_config(2)
    with pytest.raises(ConfigError):
        feature_forward(build_unet(cfg, 0, heads=True), cfg, Tensor(np.zeros((1, 1, 16, 16))))


def test_discriminator_shapes_and_grad(rng):
    p = build_discriminator(0)
    out = disc_forward(p, Tensor(rng.standard_normal((2, 1, 32, 32)).astype(np.float32)))
    assert out.shape == (2, 1, 2, 2)
    assert disc_forward(build_discriminator(0), Tensor(np.zeros((1, 16, 16)))).shape == (1, 1, 1)
    with pytest.raises(ShapeError):
        disc_forward(p, Tensor(np.zeros((1, 1, 8, 8))))
    p64 = build_discriminator(3, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 1, 32, 32)))
    w = rng.standard_normal((1, 1, 2, 2))
    err = check_gradients(lambda: tsum(disc_forward(p64, x) * Tensor(w)), list(p64.values()), samples=4, rng=rng)
    assert err < 1e-3
