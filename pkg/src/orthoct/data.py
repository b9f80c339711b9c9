"""Synthetic chest phantoms, the on-disk volume format, resampling and splits."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.functional import apply_along, interp_matrix
from .geometry import HU_MAX, HU_MIN, Projection, Volume

MAGIC = "ORTHOCT-ARRAY 1"


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class ByteCountMismatchError(VolumeFormatError):
    pass


# -- phantoms ------------------------------------------------------------------


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (2.8, 2.8, 2.8)
    body_hu: tuple[float, float] = (0.0, 60.0)
    lung_hu: tuple[float, float] = (-850.0, -700.0)
    spine_hu: tuple[float, float] = (400.0, 900.0)
    air_hu: float = -1000.0
    # semi-axes as fractions of the half-extent of the volume
    body_axes: tuple[tuple[float, float], tuple[float, float]] = ((0.75, 0.9), (0.55, 0.7))
    lung_offset: tuple[float, float] = (0.45, 0.52)
    lung_radii: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] = (
        (0.26, 0.33),
        (0.42, 0.52),
        (0.65, 0.85),
    )
    spine_radius: float = 0.12

    def __post_init__(self):
        for name in ("body_hu", "lung_hu", "spine_hu"):
            lo, hi = getattr(self, name)
            if not HU_MIN <= lo <= hi <= HU_MAX:
                raise ValueError(f"{name} must lie inside [{HU_MIN}, {HU_MAX}], got {(lo, hi)}")


def _grid(dims):
    return np.meshgrid(*[(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims], indexing="ij")


def render_phantom(spec: PhantomSpec) -> tuple[Volume, dict[str, np.ndarray]]:
    """Phantom volume plus the analytic tissue masks it was painted from."""
    rng = np.random.default_rng(spec.seed)
    x, y, z = _grid(spec.dims)
    u = rng.uniform

    a, b = u(*spec.body_axes[0]), u(*spec.body_axes[1])
    body = (x / a) ** 2 + (y / b) ** 2 <= 1.0

    lungs = np.zeros(spec.dims, dtype=bool)
    values = np.full(spec.dims, spec.air_hu, dtype=np.float64)
    tissue = u(*spec.body_hu)
    ripple = 0.5 * (spec.body_hu[1] - spec.body_hu[0]) * 0.3
    texture = ripple * np.sin(np.pi * (2.0 * x + u(0, 2))) * np.cos(np.pi * (1.5 * y + u(0, 2)))
    values[body] = np.clip(tissue + texture, *spec.body_hu)[body]

    lung_values = np.zeros(spec.dims)
    for side in (-1.0, 1.0):
        cx = side * u(*spec.lung_offset) * a
        cy = u(-0.1, 0.05) * b
        cz = u(-0.1, 0.1)
        rx = u(*spec.lung_radii[0]) * a
        ry = u(*spec.lung_radii[1]) * b
        rz = u(*spec.lung_radii[2])
        m = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0
        lungs |= m
        lung_values[m] = u(*spec.lung_hu)

    r = spec.spine_radius * b
    spine = x**2 + (y - 0.6 * b) ** 2 <= r**2
    phase, freq = u(0, 2 * np.pi), u(3.0, 5.0)
    lo, hi = spec.spine_hu
    vertebra = lo + (hi - lo) * (0.5 + 0.5 * np.sin(np.pi * freq * z + phase))
    if np.any(spine & lungs):
        raise ValueError("phantom parameters produced overlapping lung and spine")

    values[lungs] = lung_values[lungs]
    values[spine] = vertebra[spine]
    vol = Volume(values.astype(np.float32), spec.spacing).clamped()
    return vol, {"body": body, "lung": lungs, "spine": spine}


def generate_phantom(spec: PhantomSpec) -> Volume:
    return render_phantom(spec)[0]


# -- resampling ------------------------------------------------------------------


def resample(vol: Volume, new_dims, new_spacing) -> Volume:
    """Trilinear resampling on centre-aligned physical grids, edge-clamped."""
    new_dims = tuple(int(n) for n in new_dims)
    new_spacing = tuple(float(s) for s in new_spacing)
    if min(new_dims) < 1 or min(new_spacing) <= 0:
        raise ValueError("resample targets must be positive")
    mats = []
    for n_old, s_old, n_new, s_new in zip(vol.dims, vol.spacing, new_dims, new_spacing):
        ratio = s_new / s_old
        j = np.arange(n_new)
        src = (j - (n_new - 1) / 2.0) * ratio + (n_old - 1) / 2.0
        mats.append(interp_matrix(src, n_old))
    values = apply_along(vol.values.astype(np.float64), mats, (0, 1, 2))
    return Volume(values.astype(vol.values.dtype), new_spacing)


# -- file format ---------------------------------------------------------------


def _write_array(path, kind: str, values: np.ndarray, spacing, extra: dict[str, str]) -> None:
    header = [MAGIC, f"kind {kind}"]
    header += [f"{k} {v}" for k, v in extra.items()]
    header += [
        "dims " + " ".join(str(n) for n in values.shape),
        "spacing " + " ".join(repr(float(s)) for s in spacing),
        "dtype f32le",
        "end",
    ]
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload)
    os.replace(tmp, path)


def _read_array(path) -> tuple[dict[str, str], np.ndarray]:
    raw = Path(path).read_bytes()
    first, _, _ = raw.partition(b"\n")
    if first.decode("ascii", "replace") != MAGIC:
        raise BadMagicError(f"{path}: bad magic {first[:32]!r}")
    marker = b"\nend\n"
    pos = raw.find(marker)
    if pos < 0:
        raise TruncatedPayloadError(f"{path}: truncated header (no end marker)")
    fields = {}
    for line in raw[:pos].decode("ascii").split("\n")[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    if fields.get("dtype") != "f32le":
        raise VolumeFormatError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
    payload = raw[pos + len(marker):]
    if len(payload) % 4:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(payload)} bytes is not whole float32 values)")
    dims = tuple(int(v) for v in fields["dims"].split())
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise ByteCountMismatchError(f"{path}: payload has {len(payload)} bytes, header dims {dims} need {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return fields, values


def _spacing(fields) -> tuple[float, ...]:
    return tuple(float(v) for v in fields["spacing"].split())


def save_volume(vol: Volume, path) -> None:
    _write_array(path, "volume", vol.values, vol.spacing, {})


def load_volume(path) -> Volume:
    fields, values = _read_array(path)
    if fields.get("kind") != "volume":
        raise VolumeFormatError(f"{path}: expected a volume, found {fields.get('kind')!r}")
    return Volume(values, _spacing(fields))


def save_projection(proj: Projection, path) -> None:
    _write_array(path, "projection", proj.values, proj.pixel_spacing, {"axis": proj.axis})


def load_projection(path) -> Projection:
    fields, values = _read_array(path)
    if fields.get("kind") != "projection":
        raise VolumeFormatError(f"{path}: expected a projection, found {fields.get('kind')!r}")
    return Projection(fields["axis"], values, _spacing(fields))


# -- splits ------------------------------------------------------------------


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str]] = field(default_factory=list)
    seed: int = 0

    @property
    def train(self) -> list[str]:
        return [p for p, s in self.entries if s == "train"]

    @property
    def test(self) -> list[str]:
        return [p for p, s in self.entries if s == "test"]

    def save(self, path) -> None:
        lines = [f"# seed {self.seed}"] + [f"{p},{s}" for p, s in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        seed, entries = 0, []
        for line in Path(path).read_text().splitlines():
            if line.startswith("# seed"):
                seed = int(line.split()[-1])
            elif line.strip():
                p, _, s = line.rpartition(",")
                if s not in ("train", "test"):
                    raise ValueError(f"{path}: bad split tag {s!r}")
                entries.append((p, s))
        return cls(entries, seed)


def split_dataset(items, train_fraction: float, seed: int) -> DatasetManifest:
    """Seeded shuffle followed by a prefix split; ``items`` is a count or a list of paths."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    names = [str(i) for i in range(items)] if isinstance(items, int) else [str(p) for p in items]
    order = np.random.default_rng(seed).permutation(len(names))
    n_train = int(round(len(names) * train_fraction))
    train = set(order[:n_train].tolist())
    return DatasetManifest([(n, "train" if i in train else "test") for i, n in enumerate(names)], seed)
