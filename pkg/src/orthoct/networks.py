"""U-Net variants and the patch discriminator, built on :mod:`orthoct.autodiff`.

Parameters live in a flat, ordered :class:`NetworkParams` mapping keyed by
path-like names (``enc.L0.conv0.kernel``); forward functions are pure
functions of ``(params, cfg, x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    conv,
    instance_norm,
    l2_normalize,
    leaky_relu,
    linear_upsample,
    max_pool,
    transposed_conv,
)
from .autodiff.functional import ShapeError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    dims: int = 2
    levels: int = 4
    base_channels: int = 8
    channel_schedule: tuple[int, ...] | None = None
    in_channels: int = 1
    out_channels: int = 1
    final_adapt_conv: bool = True
    upsample_mode: str = "transposed_conv"
    # residual: output = input + network(input); the final conv starts at zero
    residual: bool = False
    head_dim: int = 32
    slope: float = 0.2
    eps: float = 1e-5

    def __post_init__(self):
        if self.channel_schedule is not None:
            object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        self.validate()

    @property
    def widths(self) -> tuple[int, ...]:
        """Per-level channel counts: the explicit schedule, else base_channels doubling per level."""
        if self.channel_schedule is not None:
            return self.channel_schedule
        return tuple(self.base_channels * 2**i for i in range(self.levels))

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        sched = self.widths
        if len(sched) != self.levels:
            raise ConfigError(f"channel_schedule has {len(sched)} entries for {self.levels} levels")
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise ConfigError(f"channel widths must strictly increase, got {sched}")
        if self.upsample_mode not in ("transposed_conv", "linear_interp"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.residual and (not self.final_adapt_conv or self.in_channels != self.out_channels):
            raise ConfigError("residual output needs the final adaptation conv and matching in/out channels")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


def paper_config(dims: int = 3) -> UNetConfig:
    """Five levels with widths 64..1024."""
    return UNetConfig(dims=dims, levels=5, channel_schedule=(64, 128, 256, 512, 1024))


def desk_config(dims: int = 2, **overrides) -> UNetConfig:
    return UNetConfig(**{"dims": dims, "levels": 4, "base_channels": 8, **overrides})


def feature_config(base: UNetConfig) -> UNetConfig:
    """Feature-network variant: interpolation upsampling, no output adaptation conv."""
    return replace(base, upsample_mode="linear_interp", final_adapt_conv=False, residual=False)


class NetworkParams(dict):
    """Ordered ``name -> Tensor`` mapping with the helpers training needs."""

    def tensors(self) -> Iterator[Tensor]:
        return iter(self.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def set_trainable(self, flag: bool) -> None:
        for t in self.values():
            t.requires_grad = flag

    def clone(self, requires_grad: bool | None = None) -> "NetworkParams":
        return NetworkParams(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad))
            for k, v in self.items()
        )

    def check_compatible(self, other: "NetworkParams") -> None:
        if list(self.keys()) != list(other.keys()):
            missing = set(self) ^ set(other)
            raise ValueError(f"parameter names differ: {sorted(missing)[:5]}")
        for k in self:
            if self[k].shape != other[k].shape:
                raise ValueError(f"shape mismatch for {k}: {self[k].shape} vs {other[k].shape}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}


# -- construction ------------------------------------------------------------------


class _Builder:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params = NetworkParams()

    def conv(self, name: str, cin: int, cout: int, k: int, dims: int, bias: bool = True, zero: bool = False):
        shape = (cout, cin) + (k,) * dims
        fan_in = cin * k**dims
        # Kaiming-normal for leaky ReLU with slope 0.2
        std = 0.0 if zero else np.sqrt(2.0 / ((1 + 0.2**2) * fan_in))
        w = self.rng.standard_normal(shape) * std
        self.params[f"{name}.kernel"] = Tensor(w.astype(self.dtype), requires_grad=True)
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True)

    def tconv(self, name: str, cin: int, cout: int, k: int, dims: int):
        shape = (cin, cout) + (k,) * dims
        std = np.sqrt(2.0 / ((1 + 0.2**2) * cin * k**dims / 2**dims))
        self.params[f"{name}.kernel"] = Tensor((self.rng.standard_normal(shape) * std).astype(self.dtype), True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True)

    def norm(self, name: str, c: int):
        self.params[f"{name}.gain"] = Tensor(np.ones(c, self.dtype), requires_grad=True)
        self.params[f"{name}.shift"] = Tensor(np.zeros(c, self.dtype), requires_grad=True)

    def block(self, name: str, cin: int, cout: int, dims: int):
        # conv bias is omitted: the following instance norm cancels it exactly
        self.conv(f"{name}.conv0", cin, cout, 3, dims, bias=False)
        self.norm(f"{name}.norm0", cout)
        self.conv(f"{name}.conv1", cout, cout, 3, dims, bias=False)
        self.norm(f"{name}.norm1", cout)


def build_unet(cfg: UNetConfig, seed: int, dtype=np.float32, heads: bool | None = None) -> NetworkParams:
    """Deterministically initialized parameters for ``cfg``.

    ``heads`` adds the two projection heads used by :func:`feature_forward`;
    it defaults to on for feature configs (interpolating, no adaptation conv).
    """
    cfg.validate()
    if heads is None:
        heads = cfg.upsample_mode == "linear_interp" and not cfg.final_adapt_conv
    b = _Builder(seed, dtype)
    widths = cfg.widths
    cin = cfg.in_channels
    for lvl, c in enumerate(widths):
        b.block(f"enc.L{lvl}", cin, c, cfg.dims)
        cin = c
    for lvl in range(cfg.levels - 2, -1, -1):
        deeper, c = widths[lvl + 1], widths[lvl]
        if cfg.upsample_mode == "transposed_conv":
            b.tconv(f"dec.L{lvl}.up", deeper, c, 2, cfg.dims)
            merged = 2 * c
        else:
            merged = deeper + c
        b.block(f"dec.L{lvl}", merged, c, cfg.dims)
    if cfg.final_adapt_conv:
        b.conv("out", widths[0], cfg.out_channels, 1, cfg.dims, zero=cfg.residual)
    if heads:
        for name, c in (("head_sem", widths[-1]), ("head_ana", widths[0])):
            b.conv(f"{name}.conv0", c, cfg.head_dim, 1, cfg.dims)
            b.conv(f"{name}.conv1", cfg.head_dim, cfg.head_dim, 1, cfg.dims)
    return b.params


# -- forward passes ----------------------------------------------------------------


def _block(p: NetworkParams, name: str, x: Tensor, cfg: UNetConfig) -> Tensor:
    for i in (0, 1):
        x = conv(x, p[f"{name}.conv{i}.kernel"], None, 1, 1, cfg.dims)
        x = instance_norm(x, p[f"{name}.norm{i}.gain"], p[f"{name}.norm{i}.shift"], cfg.eps, cfg.dims)
        x = leaky_relu(x, cfg.slope)
    return x


def _check_input(cfg: UNetConfig, x: Tensor) -> None:
    sp = x.shape[-cfg.dims:]
    if x.ndim not in (cfg.dims + 1, cfg.dims + 2):
        raise ShapeError(f"expected (C, *{cfg.dims}d) or (N, C, *{cfg.dims}d) input, got {x.shape}")
    if x.shape[-cfg.dims - 1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got shape {x.shape}")
    if any(n % cfg.divisor for n in sp):
        raise ShapeError(f"spatial extents {sp} must be divisible by {cfg.divisor}")


def _encode_decode(p: NetworkParams, cfg: UNetConfig, x: Tensor) -> tuple[list[Tensor], Tensor]:
    _check_input(cfg, x)
    skips = []
    h = x
    for lvl in range(cfg.levels):
        if lvl > 0:
            h = max_pool(h, 2, cfg.dims)
        h = _block(p, f"enc.L{lvl}", h, cfg)
        skips.append(h)
    caxis = x.ndim - cfg.dims - 1
    for lvl in range(cfg.levels - 2, -1, -1):
        if cfg.upsample_mode == "transposed_conv":
            h = transposed_conv(h, p[f"dec.L{lvl}.up.kernel"], p[f"dec.L{lvl}.up.bias"], 2, cfg.dims)
        else:
            h = linear_upsample(h, 2, cfg.dims)
        h = concat([h, skips[lvl]], axis=caxis)
        h = _block(p, f"dec.L{lvl}", h, cfg)
    return skips, h


def encoder_features(p: NetworkParams, cfg: UNetConfig, x: Tensor) -> list[Tensor]:
    """Per-level encoder activations (used by the perceptual extractor)."""
    _check_input(cfg, x)
    feats = []
    h = x
    for lvl in range(cfg.levels):
        if lvl > 0:
            h = max_pool(h, 2, cfg.dims)
        h = _block(p, f"enc.L{lvl}", h, cfg)
        feats.append(h)
    return feats


def unet_forward(p: NetworkParams, cfg: UNetConfig, x: Tensor) -> Tensor:
    _, h = _encode_decode(p, cfg, x)
    if not cfg.final_adapt_conv:
        return h
    out = conv(h, p["out.kernel"], p["out.bias"], 1, 0, cfg.dims)
    return out + x if cfg.residual else out


@dataclass
class FeatureBundle:
    semantic: Tensor
    anatomy: Tensor
    # smallest vector norm seen before normalization, for degeneracy checks
    min_raw_norm: float = field(default=float("nan"), compare=False)


def _head(p: NetworkParams, name: str, h: Tensor, cfg: UNetConfig) -> Tensor:
    h = conv(h, p[f"{name}.conv0.kernel"], p[f"{name}.conv0.bias"], 1, 0, cfg.dims)
    h = leaky_relu(h, cfg.slope)
    return conv(h, p[f"{name}.conv1.kernel"], p[f"{name}.conv1.bias"], 1, 0, cfg.dims)


def feature_forward(p: NetworkParams, cfg: UNetConfig, x: Tensor) -> FeatureBundle:
    """Unit-normalized semantic (bottleneck) and anatomy (last decoder) feature maps."""
    if cfg.upsample_mode != "linear_interp" or cfg.final_adapt_conv:
        raise ConfigError("feature_forward needs upsample_mode='linear_interp' and final_adapt_conv=False")
    skips, h = _encode_decode(p, cfg, x)
    caxis = x.ndim - cfg.dims - 1
    sem_raw = _head(p, "head_sem", skips[-1], cfg)
    ana_raw = _head(p, "head_ana", h, cfg)
    min_norm = min(
        float(np.sqrt((t.data**2).sum(axis=caxis)).min()) for t in (sem_raw, ana_raw)
    )
    return FeatureBundle(l2_normalize(sem_raw, caxis), l2_normalize(ana_raw, caxis), min_norm)


# -- discriminator ---------------------------------------------------------------

DISC_WIDTHS = (8, 16, 32, 64)


def build_discriminator(seed: int, in_channels: int = 1, widths=DISC_WIDTHS, dtype=np.float32) -> NetworkParams:
    b = _Builder(seed, dtype)
    cin = in_channels
    for i, c in enumerate(widths):
        b.conv(f"disc.L{i}.conv", cin, c, 4, 2, bias=(i == 0))
        if i > 0:
            b.norm(f"disc.L{i}.norm", c)
        cin = c
    b.conv("disc.out", cin, 1, 1, 2)
    return b.params


def disc_forward(p: NetworkParams, x: Tensor, slope: float = 0.2) -> Tensor:
    """Patch realness map; four stride-2 blocks then a 1x1 conv."""
    if min(x.shape[-2:]) < 16:
        raise ShapeError(f"discriminator input must be at least 16x16, got {x.shape[-2:]}")
    levels = sum(1 for k in p if k.endswith(".conv.kernel"))
    h = x
    for i in range(levels):
        h = conv(h, p[f"disc.L{i}.conv.kernel"], p.get(f"disc.L{i}.conv.bias"), 2, 1, 2)
        # a 1x1 map has no spatial statistics to normalize
        if i > 0 and h.shape[-1] * h.shape[-2] > 1:
            h = instance_norm(h, p[f"disc.L{i}.norm.gain"], p[f"disc.L{i}.norm.shift"], 1e-5, 2)
        h = leaky_relu(h, slope)
    return conv(h, p["disc.out.kernel"], p["disc.out.bias"], 1, 0, 2)
