"""Training objectives: reconstruction, perceptual, adversarial and contrastive terms.

Feature maps handed to the contrastive losses are ``FeatureBundle`` fields of
shape ``(N, D, H, W)`` or ``(D, H, W)``. Anchors are integer rows
``(b, r, c)``; ``(r, c)`` rows are accepted for single-image maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, absolute, logsumexp, mean, no_grad, reshape, square, take, transpose, tsum
from .autodiff.tensor import NonFiniteError
from .networks import FeatureBundle, NetworkParams, UNetConfig, build_unet, desk_config, encoder_features, feature_config

PERCEPTUAL_SEED = 20240817


@dataclass(frozen=True)
class ContrastiveConfig:
    n_pos_s: int = 4
    n_neg_a: int = 8
    tau: float = 0.07
    window_radius: int = 2
    anchors_per_image: int = 256
    ema_momentum: float = 0.99

    def __post_init__(self):
        limit = (2 * self.window_radius + 1) ** 2 - 1
        for name in ("n_pos_s", "n_neg_a"):
            v = getattr(self, name)
            if not 1 <= v <= limit:
                raise ValueError(f"{name} must be in [1, {limit}] for radius {self.window_radius}, got {v}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.anchors_per_image < 1:
            raise ValueError("anchors_per_image must be >= 1")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 1.0
    w_perc: float = 0.1
    w_adv: float = 0.01
    w_contrast: float = 0.1
    w_semantic_vs_anatomy: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
        if self.w_semantic_vs_anatomy > 1:
            raise ValueError("w_semantic_vs_anatomy is a split and must be <= 1")


def _same_shape(a: Tensor, b) -> None:
    if tuple(a.shape) != tuple(np.shape(getattr(b, "data", b))):
        raise ValueError(f"shape mismatch: {a.shape} vs {np.shape(getattr(b, 'data', b))}")


def _const(x, like: Tensor) -> Tensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(data.astype(like.dtype, copy=False))


def mse_loss(pred: Tensor, target) -> Tensor:
    _same_shape(pred, target)
    return mean(square(pred - _const(target, pred)))


def l1_loss(pred: Tensor, target) -> Tensor:
    _same_shape(pred, target)
    return mean(absolute(pred - _const(target, pred)))


# -- perceptual ------------------------------------------------------------------


@dataclass
class PerceptualExtractor:
    """Frozen multi-level conv stack; by default the feature network's encoder with random weights."""

    params: NetworkParams
    cfg: UNetConfig
    levels: tuple[int, ...] = (0, 1, 2, 3)

    def features(self, x: Tensor) -> list[Tensor]:
        feats = encoder_features(self.params, self.cfg, x)
        return [feats[i] for i in self.levels]


def default_extractor(seed: int = PERCEPTUAL_SEED, dtype=np.float32) -> PerceptualExtractor:
    cfg = feature_config(desk_config(2))
    params = build_unet(cfg, seed, dtype=dtype, heads=False)
    params.set_trainable(False)
    return PerceptualExtractor(params, cfg, tuple(range(cfg.levels)))


def perceptual_loss(extractor: PerceptualExtractor, pred: Tensor, target) -> Tensor:
    """Sum over levels of mean squared feature differences; the target side is constant."""
    _same_shape(pred, target)
    with no_grad():
        ref = [f.data for f in extractor.features(_const(target, pred))]
    total = None
    for f, r in zip(extractor.features(pred), ref):
        term = mean(square(f - Tensor(r)))
        total = term if total is None else total + term
    return total


def adversarial_losses(disc_real: Tensor, disc_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares GAN objectives ``(d_loss, g_loss)``.

    Pass a detached ``disc_fake`` for the discriminator update and a live one
    for the generator; both losses are returned either way.
    """
    d_loss = 0.5 * mean(square(disc_real - 1.0)) + 0.5 * mean(square(disc_fake))
    g_loss = mean(square(disc_fake - 1.0))
    return d_loss, g_loss


# -- neighbor selection -------------------------------------------------------------


def _as_nchw(fmap) -> np.ndarray:
    arr = np.asarray(getattr(fmap, "data", fmap))
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"feature map must be (D, H, W) or (N, D, H, W), got {arr.shape}")
    return arr


def _as_anchors(anchors, n_images: int) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.int64)
    if a.ndim == 1:
        a = a[None]
    if a.shape[1] == 2:
        if n_images != 1:
            raise ValueError("(r, c) anchors need a single-image map; pass (b, r, c) rows")
        a = np.concatenate([np.zeros((len(a), 1), np.int64), a], axis=1)
    if a.shape[1] != 3:
        raise ValueError(f"anchors must be (r, c) or (b, r, c) rows, got width {a.shape[1]}")
    return a


def neighbor_table(fmap, anchors, n: int, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized neighbor selection for many anchors.

    Returns ``(pos, valid)``: ``pos[i, k]`` is the ``(r, c)`` of the k-th best
    neighbor of anchor ``i`` and ``valid[i, k]`` says whether it exists (border
    windows can hold fewer than ``n`` candidates). Similarity is cosine; ties
    go to the earlier position in row-major order.
    """
    f = _as_nchw(fmap).astype(np.float64)
    anchors = _as_anchors(anchors, f.shape[0])
    _, _, h, w = f.shape
    b, r, c = anchors.T
    if np.any((r < 0) | (r >= h) | (c < 0) | (c >= w)) or np.any((b < 0) | (b >= f.shape[0])):
        raise IndexError("anchor outside the feature map")
    offs = np.array([(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1) if dr or dc])
    rr = r[:, None] + offs[None, :, 0]
    cc = c[:, None] + offs[None, :, 1]
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    va = f[b, :, r, c]  # (A, D)
    vn = f[b[:, None], :, np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]  # (A, K, D)
    dots = np.einsum("ad,akd->ak", va, vn)
    norms = np.linalg.norm(va, axis=1)[:, None] * np.linalg.norm(vn, axis=2)
    sims = dots / np.maximum(norms, 1e-12)
    key = np.where(inside, -sims, np.inf)
    order = np.argsort(key, axis=1, kind="stable")[:, :n]
    pos = np.stack([np.take_along_axis(rr, order, 1), np.take_along_axis(cc, order, 1)], axis=-1)
    valid = np.take_along_axis(inside, order, 1)
    return pos, valid


def select_neighbors(fmap, anchor, n: int, radius: int) -> list[tuple[int, int]]:
    """The ``n`` most cosine-similar non-anchor positions in the clipped window."""
    f = _as_nchw(fmap)
    if f.shape[0] != 1:
        raise ValueError("select_neighbors works on a single (D, H, W) map")
    pos, valid = neighbor_table(f, [tuple(anchor)], n, radius)
    return [(int(p[0]), int(p[1])) for p, v in zip(pos[0], valid[0]) if v]


def sample_anchors(rng: np.random.Generator, shape, count: int) -> np.ndarray:
    """``count`` distinct positions per image (all positions if the map is smaller)."""
    n, h, w = shape
    k = min(count, h * w)
    rows = []
    for b in range(n):
        flat = rng.choice(h * w, size=k, replace=False)
        rows.append(np.stack([np.full(k, b), flat // w, flat % w], axis=1))
    return np.concatenate(rows).astype(np.int64)


# -- contrastive terms ------------------------------------------------------------


def _flat_rows(t: Tensor) -> Tensor:
    """``(N, D, H, W)`` -> ``(N*H*W, D)`` keeping the graph."""
    if t.ndim == 3:
        t = reshape(t, (1,) + t.shape)
    n, d, h, w = t.shape
    return reshape(transpose(t, (0, 2, 3, 1)), (n * h * w, d))


def _check_congruent(a: Tensor, b: Tensor) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"student/teacher feature maps are not congruent: {a.shape} vs {b.shape}")


def semantic_loss(student: FeatureBundle, teacher: FeatureBundle, anchors, cfg: ContrastiveConfig) -> Tensor:
    """Mean squared distance between student and teacher semantic vectors over positive positions.

    Positives of an anchor are the anchor itself and its ``n_pos_s`` nearest
    teacher-space neighbors inside the window.
    """
    s, t = student.semantic, teacher.semantic
    _check_congruent(s, t)
    tmap = _as_nchw(t)
    n, _, h, w = tmap.shape
    a = _as_anchors(anchors, n)
    pos, valid = neighbor_table(tmap, a, cfg.n_pos_s, cfg.window_radius)
    base = a[:, 0] * h * w
    idx = np.concatenate([base + a[:, 1] * w + a[:, 2], (base[:, None] + pos[..., 0] * w + pos[..., 1])[valid]])
    srows = take(_flat_rows(s), idx)
    trows = _flat_rows(Tensor(tmap)).data[idx]
    return mean(tsum(square(srows - Tensor(trows)), axis=1))


def anatomy_infonce(student: FeatureBundle, teacher: FeatureBundle, anchors, cfg: ContrastiveConfig) -> Tensor:
    """InfoNCE with the same-position teacher vector as positive and nearest teacher neighbors as negatives."""
    s, t = student.anatomy, teacher.anatomy
    _check_congruent(s, t)
    tmap = _as_nchw(t)
    n, d, h, w = tmap.shape
    a = _as_anchors(anchors, n)
    pos, valid = neighbor_table(tmap, a, cfg.n_neg_a, cfg.window_radius)
    base = a[:, 0] * h * w
    anchor_idx = base + a[:, 1] * w + a[:, 2]
    neg_idx = base[:, None] + pos[..., 0] * w + pos[..., 1]
    tflat = _flat_rows(Tensor(tmap)).data
    keys = np.concatenate([tflat[anchor_idx][:, None, :], tflat[neg_idx]], axis=1)  # (A, 1+K, D)
    mask = np.concatenate([np.ones((len(a), 1), bool), valid], axis=1)
    q = reshape(take(_flat_rows(s), anchor_idx), (len(a), 1, d))
    logits = tsum(q * Tensor(keys.astype(q.dtype)), axis=2) * (1.0 / cfg.tau)
    positive = take(logits, (slice(None), 0))
    return mean(logsumexp(logits, axis=1, mask=mask) - positive)


# -- EMA and combination ----------------------------------------------------------


def ema_update(teacher: NetworkParams, student: NetworkParams, m: float) -> NetworkParams:
    """In-place ``theta_t <- m*theta_t + (1-m)*theta_s`` (written as a step toward the student)."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    teacher.check_compatible(student)
    for name, t in teacher.items():
        src = student[name].data
        if m == 0.0:
            t.data = src.astype(t.data.dtype, copy=True)
        elif m < 1.0:
            t.data = (t.data + t.data.dtype.type(1.0 - m) * (src - t.data)).astype(t.data.dtype)
        t.grad = None
    return teacher


def hybrid_loss(l1, perc, g_adv, semantic, anatomy, w: LossWeights):
    """Weighted sum; the contrastive weight is split between its semantic and anatomy parts."""
    parts = {"l1": l1, "perc": perc, "g_adv": g_adv, "semantic": semantic, "anatomy": anatomy}
    for name, v in parts.items():
        val = float(v.item() if isinstance(v, Tensor) else v)
        if not math.isfinite(val):
            raise NonFiniteError(f"hybrid_loss component {name} is {val}")
    split = w.w_semantic_vs_anatomy
    terms = [
        (w.w_l1, l1),
        (w.w_perc, perc),
        (w.w_adv, g_adv),
        (w.w_contrast * split, semantic),
        (w.w_contrast * (1.0 - split), anatomy),
    ]
    total = 0.0
    for weight, v in terms:
        if weight == 0.0:
            continue
        total = total + v * weight if isinstance(v, Tensor) else total + weight * float(v)
    return total
