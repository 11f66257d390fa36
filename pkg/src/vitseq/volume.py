"""Volume ingestion (BVOL v1), axial slice selection and preparation, and
a synthetic desk-scale dataset generator.

BVOL v1 layout: 8-byte magic ``BVOL0001``, a little-endian uint32 length
prefix, that many bytes of UTF-8 JSON header {dims:[d,h,w], spacing:[...],
dtype:"f32"}, then d*h*w little-endian float32 voxels in row-major
(axial, row, column) order. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError, StorageError

BVOL_MAGIC = b"BVOL0001"


@dataclass
class VolumeHeader:
    dims: tuple[int, int, int]  # (depth, height, width); axial index first
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype: str = "f32"

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise FormatError(f"bad volume dims {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise FormatError(f"bad voxel spacing {self.spacing}")
        if self.dtype != "f32":
            raise FormatError(f"unsupported voxel dtype {self.dtype!r}")


@dataclass
class Volume:
    header: VolumeHeader
    voxels: np.ndarray  # depth x height x width float32

    def __post_init__(self):
        if tuple(self.voxels.shape) != tuple(self.header.dims):
            raise CorruptionError(
                f"voxel shape {self.voxels.shape} does not match header dims "
                f"{self.header.dims}"
            )


def _atomic_write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"failed to write {path}: {exc}") from exc


def write_volume(volume: Volume, path) -> None:
    header = json.dumps(
        {
            "dims": list(volume.header.dims),
            "spacing": list(volume.header.spacing),
            "dtype": volume.header.dtype,
        },
        sort_keys=True,
    ).encode("utf-8")
    blob = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()
    _atomic_write(path, BVOL_MAGIC + struct.pack("<I", len(header)) + header + blob)


def load_volume(path) -> Volume:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:8] != BVOL_MAGIC:
        raise FormatError(f"{path}: not a BVOL v1 file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CorruptionError(f"{path}: truncated JSON header")
    try:
        header_json = json.loads(raw[12:12 + hlen].decode("utf-8"))
        header = VolumeHeader(
            dims=tuple(header_json["dims"]),
            spacing=tuple(header_json["spacing"]),
            dtype=header_json["dtype"],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed BVOL header: {exc}") from exc
    d, h, w = header.dims
    blob = raw[12 + hlen:]
    if len(blob) != d * h * w * 4:
        raise CorruptionError(
            f"{path}: blob holds {len(blob) // 4} floats, header declares {d * h * w}"
        )
    voxels = np.frombuffer(blob, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return Volume(header, voxels)


# ---------------------------------------------------------------------------
# slice selection and preparation


def select_axial_slices(volume: Volume, count: int) -> list[np.ndarray]:
    """The central `count` consecutive axial slabs, anatomical order."""
    depth = volume.header.dims[0]
    if depth < count:
        raise DataError(f"volume depth {depth} < requested {count} slices")
    start = (depth - count) // 2
    return [volume.voxels[start + t] for t in range(count)]


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with corner-aligned sampling positions."""
    h, w = src.shape
    src = src.astype(np.float32)

    def coords(n_out, n_src):
        if n_out == 1 or n_src == 1:
            return np.zeros(n_out, dtype=np.float64)
        return np.arange(n_out, dtype=np.float64) * (n_src - 1) / (n_out - 1)

    ys = coords(out_h, h)
    xs = coords(out_w, w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    out = (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
           + c * fy * (1 - fx) + d * fy * fx)
    return out.astype(np.float32)


def prepare_slice(slab: np.ndarray, cfg, norm_mean=None, norm_std=None) -> np.ndarray:
    """Resample a 2D slab to the model's input resolution, min-max rescale
    to [0,1] (constant slabs map to 0), replicate to the channel count, and
    standardize each channel with the checkpoint's constants."""
    slab = np.asarray(slab, dtype=np.float32)
    if slab.ndim != 2 or slab.shape[0] < 2 or slab.shape[1] < 2:
        raise DataError(f"slab shape {slab.shape} must be at least 2x2")
    if not np.isfinite(slab).all():
        raise DataError("slab contains non-finite values")
    resized = bilinear_resize(slab, cfg.image_size, cfg.image_size)
    lo, hi = float(resized.min()), float(resized.max())
    unit = (resized - lo) / (hi - lo) if hi > lo else np.zeros_like(resized)
    image = np.repeat(unit[:, :, None], cfg.channels, axis=2)
    mean = np.asarray(
        norm_mean if norm_mean is not None else [0.5] * cfg.channels, dtype=np.float32
    )
    std = np.asarray(
        norm_std if norm_std is not None else [0.5] * cfg.channels, dtype=np.float32
    )
    return ((image - mean) / std).astype(np.float32)


def volume_to_slices(volume: Volume, cfg, count: int, norm_mean=None, norm_std=None):
    return [
        prepare_slice(slab, cfg, norm_mean, norm_std)
        for slab in select_axial_slices(volume, count)
    ]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (16, 32, 32)
    noise_std: float = 0.1
    amplitude: float = 0.5
    blob_sigma: float = 4.0

    def __post_init__(self):
        if self.noise_std <= 0 or self.amplitude < 0 or self.blob_sigma <= 0:
            raise ConfigError("SynthConfig values must be positive")


@dataclass
class Sample:
    sid: str
    label: int
    volume: Volume | None = None
    features: np.ndarray | None = None  # T x D_f, once extracted


@dataclass
class Dataset:
    samples: list[Sample]
    label_map: dict[str, int] = field(default_factory=lambda: {"NC": 0, "AD": 1})

    def __len__(self) -> int:
        return len(self.samples)


def blob_center(dims, num_classes: int, label: int):
    """Class-dependent blob position: shifted along the width axis."""
    d, h, w = dims
    return (d / 2.0, h / 2.0, w * (label + 1) / (num_classes + 1))


def synth_dataset(n: int, num_classes: int, cfg: SynthConfig, seed: int) -> Dataset:
    """Seeded noise volumes with a class-dependent Gaussian blob; labels
    balanced to within one sample."""
    if n < num_classes:
        raise ConfigError(f"need at least {num_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    d, h, w = cfg.dims
    zz, yy, xx = np.meshgrid(
        np.arange(d), np.arange(h), np.arange(w), indexing="ij"
    )
    samples = []
    for i in range(n):
        label = i % num_classes
        cz, cy, cx = blob_center(cfg.dims, num_classes, label)
        dist2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
        blob = cfg.amplitude * (label + 1) * np.exp(-dist2 / (2 * cfg.blob_sigma ** 2))
        voxels = (blob + rng.normal(0.0, cfg.noise_std, size=(d, h, w))).astype(
            np.float32
        )
        samples.append(
            Sample(sid=f"synth{i:04d}", label=label,
                   volume=Volume(VolumeHeader((d, h, w)), voxels))
        )
    label_map = {f"class{c}": c for c in range(num_classes)}
    if num_classes == 2:
        label_map = {"NC": 0, "AD": 1}
    return Dataset(samples, label_map)
