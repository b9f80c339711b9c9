"""Image-quality metrics for reconstructed volumes.

The second argument is always the reference. SSIM and VIF run per axial
slice; VIF pools information sums over slices before taking the ratio.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, no_grad
from .geometry import Volume, normalize_volume
from .losses import PerceptualExtractor

PSNR_PEAK = 2000.0
PSNR_CAP = 100.0
METRIC_COLUMNS = ("mae", "psnr", "ssim", "vif", "perceptual", "dice")


def _values(v) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, Volume) else v, dtype=np.float64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = _values(pred), _values(gt)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    return a, b


def mae(pred, gt) -> float:
    a, b = _pair(pred, gt)
    return float(np.mean(np.abs(a - b)))


def psnr(pred, gt, peak: float = PSNR_PEAK) -> float:
    a, b = _pair(pred, gt)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


# -- SSIM -------------------------------------------------------------------------


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _valid_filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable correlation over axes 0 and 1, keeping only fully covered positions."""
    half = len(win) // 2
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = PSNR_PEAK, size: int = 11, sigma: float = 1.5):
    """SSIM over the valid region of each axial slice; arrays are ``(X, Y[, Z])``."""
    if min(a.shape[:2]) < size:
        raise ValueError(f"slices of {a.shape[:2]} are smaller than the {size}-tap window")
    win = gaussian_window(size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu1, mu2 = _valid_filter(a, win), _valid_filter(b, win)
    s11 = _valid_filter(a * a, win) - mu1 * mu1
    s22 = _valid_filter(b * b, win) - mu2 * mu2
    s12 = _valid_filter(a * b, win) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return num / den


def ssim(pred, gt, data_range: float = PSNR_PEAK) -> float:
    """Mean over axial slices of the slice-mean SSIM (11-tap Gaussian, sigma 1.5)."""
    a, b = _pair(pred, gt)
    m = ssim_map(a, b, data_range)
    per_slice = m.mean(axis=(0, 1))
    return float(np.mean(per_slice))


# -- VIF ----------------------------------------------------------------------------


def _to_gray(x: np.ndarray, window=(-1000.0, 1000.0)) -> np.ndarray:
    lo, hi = window
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0) * 255.0


def vif_sums(ref: np.ndarray, dist: np.ndarray, sigma_nsq: float = 2.0, scales: int = 4) -> tuple[float, float]:
    """Pixel-domain VIF numerator and denominator over ``(X, Y[, Z])`` arrays, filtering in-slice only."""
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, scales + 1):
        n = 2 ** (scales - scale + 1) + 1
        sd = n / 5.0
        sig = (sd, sd) + (0,) * (ref.ndim - 2)
        if scale > 1:
            ref = ndimage.gaussian_filter(ref, sig, mode="reflect")[::2, ::2]
            dist = ndimage.gaussian_filter(dist, sig, mode="reflect")[::2, ::2]
        mu1 = ndimage.gaussian_filter(ref, sig, mode="reflect")
        mu2 = ndimage.gaussian_filter(dist, sig, mode="reflect")
        s1 = np.maximum(ndimage.gaussian_filter(ref * ref, sig, mode="reflect") - mu1 * mu1, 0.0)
        s2 = np.maximum(ndimage.gaussian_filter(dist * dist, sig, mode="reflect") - mu2 * mu2, 0.0)
        s12 = ndimage.gaussian_filter(ref * dist, sig, mode="reflect") - mu1 * mu2
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat1 = s1 < eps
        g[flat1] = 0.0
        sv[flat1] = s2[flat1]
        s1 = np.where(flat1, 0.0, s1)
        flat2 = s2 < eps
        g[flat2] = 0.0
        sv[flat2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, eps)
        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + sigma_nsq))))
        den += float(np.sum(np.log10(1.0 + s1 / sigma_nsq)))
    return num, den


def vif(pred, gt, window=(-1000.0, 1000.0)) -> float:
    """Visual information fidelity of ``pred`` against reference ``gt`` on the 0-255 display scale."""
    a, b = _pair(pred, gt)
    num, den = vif_sums(_to_gray(b, window), _to_gray(a, window))
    if den == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return num / den


# -- perceptual distance -----------------------------------------------------------------


def _slice_features(extractor: PerceptualExtractor, vol: np.ndarray, window) -> list[np.ndarray]:
    x = normalize_volume(vol, *window).astype(extractor.params[next(iter(extractor.params))].dtype)
    slices = np.ascontiguousarray(x.transpose(2, 0, 1)[:, None])
    with no_grad():
        feats = extractor.features(Tensor(slices))
    out = []
    for f in feats:
        d = f.data.astype(np.float64)
        out.append(d / (np.sqrt((d * d).sum(axis=1, keepdims=True)) + 1e-10))
    return out


def perceptual_distance(extractor: PerceptualExtractor, pred, gt, window=(-1000.0, 1000.0)) -> float:
    """Mean over levels of the spatially averaged squared distance between unit-normalized features."""
    a, b = _pair(pred, gt)
    fa, fb = _slice_features(extractor, a, window), _slice_features(extractor, b, window)
    return float(np.mean([((u - v) ** 2).sum(axis=1).mean() for u, v in zip(fa, fb)]))


# -- lung segmentation --------------------------------------------------------------------


def body_mask(vol, hu_threshold: float = -500.0) -> np.ndarray:
    """Largest connected component above ``hu_threshold`` with axial holes filled."""
    v = _values(vol)
    labels, n = ndimage.label(v > hu_threshold)
    if n == 0:
        return np.zeros(v.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    body = labels == (int(np.argmax(sizes)) + 1)
    for z in range(body.shape[2]):
        body[:, :, z] = ndimage.binary_fill_holes(body[:, :, z])
    return body


def segment_lung(vol, hu_threshold: float = -300.0, body: np.ndarray | None = None) -> np.ndarray:
    v = _values(vol)
    if body is None:
        body = body_mask(v)
    if body.shape != v.shape:
        raise ValueError(f"body mask dims {body.shape} do not match volume {v.shape}")
    return (v < hu_threshold) & body


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# -- reports ---------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def _matrix(self) -> np.ndarray:
        return np.array([[self.rows[k][c] for c in METRIC_COLUMNS] for k in sorted(self.rows)])

    @property
    def mean(self) -> dict[str, float]:
        return dict(zip(METRIC_COLUMNS, self._matrix().mean(axis=0).tolist()))

    @property
    def std(self) -> dict[str, float]:
        return dict(zip(METRIC_COLUMNS, self._matrix().std(axis=0).tolist()))

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("volume",) + METRIC_COLUMNS)
            for name in sorted(self.rows):
                w.writerow([name] + [repr(self.rows[name][c]) for c in METRIC_COLUMNS])
            for label, agg in (("mean", self.mean), ("std", self.std)):
                w.writerow([label] + [repr(agg[c]) for c in METRIC_COLUMNS])


def evaluate_pair(pred, gt, extractor: PerceptualExtractor) -> dict[str, float]:
    a, b = _pair(pred, gt)
    return {
        "mae": mae(a, b),
        "psnr": psnr(a, b),
        "ssim": ssim(a, b),
        "vif": vif(a, b),
        "perceptual": perceptual_distance(extractor, a, b),
        "dice": dice(segment_lung(a), segment_lung(b)),
    }


def evaluate(pred_set: dict, gt_set: dict, extractor: PerceptualExtractor) -> MetricsReport:
    """Per-volume metrics for name-paired prediction and reference sets."""
    unpaired = sorted(set(pred_set) ^ set(gt_set))
    if unpaired:
        raise ValueError(f"unpaired volumes: {', '.join(unpaired)}")
    if not pred_set:
        raise ValueError("nothing to evaluate")
    return MetricsReport({k: evaluate_pair(pred_set[k], gt_set[k], extractor) for k in sorted(gt_set)})
