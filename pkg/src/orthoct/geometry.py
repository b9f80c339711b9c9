"""Parallel-beam orthogonal projection and two-view back-projection.

Volumes are indexed ``values[x, y, z]``. The AP view integrates along ``y``
and yields an ``(nx, nz)`` image; the LAT view integrates along ``x`` and
yields ``(ny, nz)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HU_MIN, HU_MAX = -1024.0, 3071.0
AXES = {"AP": 1, "LAT": 0}


class GeometryError(ValueError):
    pass


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise GeometryError(f"volume must be 3-D, got shape {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise GeometryError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def clamped(self) -> "Volume":
        """Copy with values clipped to the valid HU range (applied on ingest)."""
        return Volume(np.clip(self.values, HU_MIN, HU_MAX).astype(self.values.dtype), self.spacing)


@dataclass
class Projection:
    axis: str
    values: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.axis not in AXES:
            raise GeometryError(f"axis must be AP or LAT, got {self.axis!r}")
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise GeometryError(f"projection must be 2-D, got shape {self.values.shape}")
        self.pixel_spacing = tuple(float(s) for s in self.pixel_spacing)

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape


def forward_project(vol: Volume, axis: str) -> Projection:
    """Line integrals (HU*mm) along ``axis``."""
    ax = AXES[axis]
    spacing = vol.spacing
    values = vol.values.sum(axis=ax) * vol.values.dtype.type(spacing[ax])
    pixel = tuple(s for i, s in enumerate(spacing) if i != ax)
    return Projection(axis, values, pixel)


def smear(proj: Projection, dims, spacing) -> np.ndarray:
    """Unnormalized back-projection: the exact adjoint of :func:`forward_project`."""
    ax = AXES[proj.axis]
    face = tuple(n for i, n in enumerate(dims) if i != ax)
    if proj.dims != face:
        raise GeometryError(f"{proj.axis} projection has dims {proj.dims}, expected {face} for volume {tuple(dims)}")
    values = np.expand_dims(proj.values, ax) * proj.values.dtype.type(spacing[ax])
    return np.broadcast_to(values, tuple(dims)).copy()


def back_project(ap: Projection, lat: Projection, dims, spacing, ap_weight: float = 0.5) -> Volume:
    """Average of the two path-length-normalized smears.

    A volume constant along both integration axes round-trips exactly.
    """
    if ap.axis != "AP" or lat.axis != "LAT":
        raise GeometryError(f"back_project needs (AP, LAT) projections, got ({ap.axis}, {lat.axis})")
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    parts = []
    for proj in (ap, lat):
        ax = AXES[proj.axis]
        path = dims[ax] * spacing[ax]
        face = tuple(n for i, n in enumerate(dims) if i != ax)
        if proj.dims != face:
            raise GeometryError(
                f"{proj.axis} projection has dims {proj.dims}, expected {face} for volume {dims}"
            )
        parts.append(np.broadcast_to(np.expand_dims(proj.values / path, ax), dims))
    dtype = np.result_type(ap.values, lat.values)
    out = (ap_weight * parts[0] + (1.0 - ap_weight) * parts[1]).astype(dtype)
    return Volume(out, spacing)


def normalize_volume(values: np.ndarray, hu_lo: float = -1000.0, hu_hi: float = 1000.0) -> np.ndarray:
    """Affine map of ``[hu_lo, hu_hi]`` onto ``[0, 1]`` with clamping."""
    if not hu_lo < hu_hi:
        raise ValueError(f"need hu_lo < hu_hi, got {hu_lo}, {hu_hi}")
    values = np.asarray(values)
    dtype = values.dtype if values.dtype.kind == "f" else np.float32
    return np.clip((values - hu_lo) / (hu_hi - hu_lo), 0.0, 1.0).astype(dtype)


def denormalize(values: np.ndarray, hu_lo: float = -1000.0, hu_hi: float = 1000.0) -> np.ndarray:
    values = np.asarray(values)
    return (values * (hu_hi - hu_lo) + hu_lo).astype(values.dtype)
