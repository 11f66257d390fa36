"""WMAN v1 named-tensor manifests: one format for imported encoder
weights, trained checkpoints, and feature caches.

Layout: 8-byte magic ``WMAN0001``, a little-endian uint32 length prefix,
that many bytes of UTF-8 JSON index, zero padding up to the next 64-byte
boundary, then the tensor blob. The index looks like::

    {"format": "WMAN", "version": 1,
     "model": {...} | null,            # config echo
     "norm": {"mean": [...], "std": [...]} | null,
     "tensors": [{"name": ..., "shape": [...], "offset": ...}, ...],
     "extra": {...}}

Offsets are relative to the start of the blob region, 64-byte aligned,
ascending and non-overlapping; every tensor is little-endian row-major
float32. Round trips are bit-exact. See docs/wman-format.md for a
hex-level example.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .bilstm import BiLSTMWeights, LSTMConfig
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    NumericError,
    StorageError,
)
from .vit import ViTConfig, ViTWeights, vit_tensor_spec

WMAN_MAGIC = b"WMAN0001"
WMAN_VERSION = 1
ALIGN = 64


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


@dataclass
class Manifest:
    index: dict
    tensors: dict[str, np.ndarray]

    @property
    def model(self) -> dict | None:
        return self.index.get("model")

    @property
    def norm(self) -> dict | None:
        return self.index.get("norm")

    @property
    def extra(self) -> dict:
        return self.index.get("extra") or {}


def save_tensors(path, named, model=None, norm=None, extra=None) -> None:
    """Write a WMAN v1 manifest. ``named`` is a dict or an iterable of
    (name, array) pairs; duplicate names are rejected before anything is
    written."""
    pairs = list(named.items()) if isinstance(named, dict) else list(named)
    seen = set()
    for name, _ in pairs:
        if name in seen:
            raise DataError(f"duplicate tensor name {name!r}")
        seen.add(name)
    arrays = []
    for name, arr in pairs:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if not np.isfinite(arr).all():
            raise NumericError(f"tensor {name!r} contains non-finite values")
        arrays.append((name, arr))

    entries = []
    offset = 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset = _align(offset + arr.nbytes)
    index = {
        "format": "WMAN",
        "version": WMAN_VERSION,
        "model": model,
        "norm": norm,
        "tensors": entries,
        "extra": extra or {},
    }
    header = json.dumps(index, sort_keys=True).encode("utf-8")
    blob_start = _align(len(WMAN_MAGIC) + 4 + len(header))
    out = bytearray(blob_start + (entries[-1]["offset"] + arrays[-1][1].nbytes
                                  if arrays else 0))
    out[:8] = WMAN_MAGIC
    out[8:12] = struct.pack("<I", len(header))
    out[12:12 + len(header)] = header
    for entry, (_, arr) in zip(entries, arrays):
        start = blob_start + entry["offset"]
        out[start:start + arr.nbytes] = arr.tobytes()

    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(bytes(out))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"failed to write {path}: {exc}") from exc


def load_manifest(path) -> Manifest:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:8] != WMAN_MAGIC:
        raise FormatError(f"{path}: not a WMAN v1 file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CorruptionError(f"{path}: truncated JSON index")
    try:
        index = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: malformed JSON index: {exc}") from exc
    if index.get("format") != "WMAN" or index.get("version") != WMAN_VERSION:
        raise FormatError(
            f"{path}: unsupported format/version "
            f"{index.get('format')!r}/{index.get('version')!r}"
        )
    blob_start = _align(12 + hlen)
    tensors: dict[str, np.ndarray] = {}
    prev_end = 0
    for entry in index["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        if offset % ALIGN != 0 or offset < prev_end:
            raise CorruptionError(f"{path}: bad offset {offset} for {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        start = blob_start + offset
        if start + nbytes > len(raw):
            raise CorruptionError(f"{path}: tensor {name!r} extends past EOF")
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=start)
            .reshape(shape)
            .astype(np.float32)
        )
        prev_end = offset + nbytes
    return Manifest(index, tensors)


# ---------------------------------------------------------------------------
# encoder weights


def save_vit_weights(path, weights: ViTWeights, norm=None, extra=None) -> None:
    save_tensors(
        path,
        {n: t.data for n, t in weights.named_tensors().items()},
        model=weights.cfg.to_dict(),
        norm=norm,
        extra=extra,
    )


def load_pretrained(path, cfg: ViTConfig):
    """Load encoder weights, enforcing the tensor-name contract. Returns
    (ViTWeights, norm constants dict or None)."""
    man = load_manifest(path)
    spec = vit_tensor_spec(cfg)
    missing = [n for n in spec if n not in man.tensors]
    if missing:
        raise FormatError(f"{path}: missing required tensors: {missing}")
    for name, shape in spec.items():
        got = man.tensors[name].shape
        if got != shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {got}, expected {shape}"
            )
    weights = ViTWeights.from_arrays(cfg, {n: man.tensors[n] for n in spec})
    return weights, man.norm


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, weights: BiLSTMWeights, seed: int, epoch: int,
                    adam_state=None, adam_cfg=None) -> None:
    named = {n: t.data for n, t in weights.named_tensors().items()}
    extra = {
        "kind": "checkpoint",
        "seed": seed,
        "epoch": epoch,
        "lstm_config": weights.cfg.to_dict(),
        "has_adam": adam_state is not None,
    }
    if adam_state is not None:
        extra["adam_step_count"] = adam_state.step_count
        if adam_cfg is not None:
            extra["adam_config"] = {
                "learning_rate": adam_cfg.learning_rate,
                "beta1": adam_cfg.beta1,
                "beta2": adam_cfg.beta2,
                "epsilon": adam_cfg.epsilon,
            }
        adam_named = {}
        for name, (m, v) in adam_state.moments.items():
            adam_named[f"adam/m/{name}"] = m
            adam_named[f"adam/v/{name}"] = v
        named = {**named, **adam_named}
    save_tensors(path, named, extra=extra)


def load_checkpoint(path, expect_cfg: LSTMConfig | None = None,
                    require_resume: bool = False):
    """Returns (BiLSTMWeights, extra dict, AdamState or None). With
    require_resume, a checkpoint lacking optimizer state is refused."""
    from .train import AdamState  # local import to avoid a cycle

    man = load_manifest(path)
    extra = man.extra
    if extra.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint manifest")
    cfg = LSTMConfig(**extra["lstm_config"])
    if expect_cfg is not None and cfg != expect_cfg:
        raise ConfigError(
            f"checkpoint config {cfg} incompatible with requested {expect_cfg}"
        )
    head_arrays = {
        n: a for n, a in man.tensors.items() if not n.startswith("adam/")
    }
    weights = BiLSTMWeights.from_arrays(cfg, head_arrays)
    state = None
    if extra.get("has_adam"):
        moments = {}
        for name in head_arrays:
            m = man.tensors.get(f"adam/m/{name}")
            v = man.tensors.get(f"adam/v/{name}")
            if m is None or v is None:
                raise CorruptionError(f"{path}: missing Adam moments for {name!r}")
            moments[name] = (m.copy(), v.copy())
        state = AdamState(moments=moments, step_count=int(extra["adam_step_count"]))
    if require_resume and state is None:
        raise ConfigError(
            f"{path}: checkpoint has no optimizer state; inference is possible "
            "but training cannot resume from it"
        )
    return weights, extra, state


# ---------------------------------------------------------------------------
# feature caches


def save_feature_cache(path, features: dict[str, np.ndarray],
                       labels: dict[str, int], model=None) -> None:
    """One T x D_f tensor per sample id; labels live in the JSON index."""
    missing = [sid for sid in features if sid not in labels]
    if missing:
        raise DataError(f"feature cache: no label for samples {missing}")
    save_tensors(
        path,
        {f"features/{sid}": arr for sid, arr in features.items()},
        model=model,
        extra={"kind": "feature-cache", "labels": labels},
    )


def load_feature_cache(path):
    """Returns (features dict sid -> T x D_f array, labels dict, model echo)."""
    man = load_manifest(path)
    if man.extra.get("kind") != "feature-cache":
        raise FormatError(f"{path}: not a feature-cache manifest")
    labels = {k: int(v) for k, v in man.extra["labels"].items()}
    features = {}
    for name, arr in man.tensors.items():
        if not name.startswith("features/"):
            raise FormatError(f"{path}: unexpected tensor {name!r} in cache")
        sid = name[len("features/"):]
        if sid not in labels:
            raise CorruptionError(f"{path}: tensor for unlabeled sample {sid!r}")
        features[sid] = arr
    return features, labels, man.model
