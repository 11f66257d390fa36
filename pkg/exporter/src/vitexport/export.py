"""Checkpoint-to-manifest conversion.

Sources, in order of preference:
- a local directory holding ``config.json`` plus ``pytorch_model.bin`` or
  ``model.safetensors`` (a downloaded copy of the published checkpoint),
- a hub model identifier (fetched through ``transformers`` when the
  machine has network access),
- a synthetic seeded state dict with the real names and shapes, for
  offline conformance testing; it flows through the identical mapping and
  fixture path.
"""

from __future__ import annotations

import importlib.resources
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .reference import pooled_features
from .wman import ExportError, write_manifest

DEFAULT_MODEL = "google/vit-base-patch16-224-in21k"
FIXTURE_SEED = 2024

BASE_CONFIG = {
    "image_size": 224,
    "patch_size": 16,
    "channels": 3,
    "layers": 12,
    "hidden_size": 768,
    "mlp_size": 3072,
    "heads": 12,
    "feature_dim": 768,
    "pooler_tanh": True,
}


def load_mapping() -> dict:
    with importlib.resources.files("vitexport").joinpath("mapping.json").open(
        "r", encoding="utf-8"
    ) as fh:
        return json.load(fh)


def expand_mapping(mapping: dict, layers: int) -> list[dict]:
    """Flatten the templated table into one row per contract tensor."""
    rows = list(mapping["static"])
    for i in range(layers):
        for row in mapping["per_layer"]:
            rows.append({
                "target": row["target"].format(i=i),
                "source": row["source"].format(i=i),
                "convert": row["convert"],
            })
    return rows


@dataclass
class ExportManifestSpec:
    source: str = DEFAULT_MODEL
    out_dir: str = "."
    mapping: dict = field(default_factory=load_mapping)
    synthetic: bool = False
    seed: int = 0
    config: dict | None = None  # synthetic-mode override of BASE_CONFIG

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.out_dir, "vit-base.wman")

    @property
    def fixture_path(self) -> str:
        return os.path.join(self.out_dir, "fixture.wman")


# ---------------------------------------------------------------------------
# source loading


def _config_from_hf(hf_cfg: dict) -> dict:
    return {
        "image_size": int(hf_cfg.get("image_size", 224)),
        "patch_size": int(hf_cfg.get("patch_size", 16)),
        "channels": int(hf_cfg.get("num_channels", 3)),
        "layers": int(hf_cfg.get("num_hidden_layers", 12)),
        "hidden_size": int(hf_cfg.get("hidden_size", 768)),
        "mlp_size": int(hf_cfg.get("intermediate_size", 3072)),
        "heads": int(hf_cfg.get("num_attention_heads", 12)),
        "feature_dim": int(hf_cfg.get("hidden_size", 768)),
        "pooler_tanh": True,
    }


def _strip_prefix(state: dict) -> dict:
    return {
        (k[len("vit."):] if k.startswith("vit.") else k): v
        for k, v in state.items()
    }


def load_local_checkpoint(path: str):
    """A directory with config.json and a weight file in either torch or
    safetensors layout. Returns (state dict, config dict)."""
    cfg_path = os.path.join(path, "config.json")
    try:
        with open(cfg_path, "r", encoding="utf-8") as fh:
            hf_cfg = json.load(fh)
    except OSError as exc:
        raise ExportError(f"cannot read {cfg_path}: {exc}") from exc

    bin_path = os.path.join(path, "pytorch_model.bin")
    st_path = os.path.join(path, "model.safetensors")
    if os.path.exists(bin_path):
        import torch
        state = torch.load(bin_path, map_location="cpu", weights_only=True)
    elif os.path.exists(st_path):
        from safetensors.torch import load_file
        state = load_file(st_path)
    else:
        raise ExportError(f"{path}: no pytorch_model.bin or model.safetensors")
    return _strip_prefix(state), _config_from_hf(hf_cfg)


def load_hub_checkpoint(model_id: str):
    try:
        from transformers import ViTModel
    except ImportError as exc:
        raise ExportError("transformers is required for hub downloads") from exc
    try:
        model = ViTModel.from_pretrained(model_id)
    except Exception as exc:
        raise ExportError(
            f"cannot fetch {model_id!r} (no network access? pass a local "
            f"checkpoint directory instead): {exc}"
        ) from exc
    state = {k: v.detach() for k, v in model.state_dict().items()}
    return _strip_prefix(state), _config_from_hf(model.config.to_dict())


def synthetic_checkpoint(cfg: dict, seed: int):
    """Seeded state dict with the published checkpoint's names and shapes."""
    rng = np.random.default_rng(seed)
    d, m = cfg["hidden_size"], cfg["mlp_size"]
    p, c = cfg["patch_size"], cfg["channels"]
    n_tok = (cfg["image_size"] // p) ** 2 + 1

    def mat(*shape, scale=0.02):
        return rng.normal(0.0, scale, size=shape).astype(np.float32)

    state = {
        "embeddings.patch_embeddings.projection.weight": mat(d, c, p, p),
        "embeddings.patch_embeddings.projection.bias": mat(d, scale=0.01),
        "embeddings.cls_token": mat(1, 1, d),
        "embeddings.position_embeddings": mat(1, n_tok, d),
        "layernorm.weight": np.ones(d, dtype=np.float32),
        "layernorm.bias": np.zeros(d, dtype=np.float32),
        "pooler.dense.weight": mat(d, d),
        "pooler.dense.bias": mat(d, scale=0.01),
    }
    for i in range(cfg["layers"]):
        base = f"encoder.layer.{i}"
        state[f"{base}.layernorm_before.weight"] = np.ones(d, dtype=np.float32)
        state[f"{base}.layernorm_before.bias"] = np.zeros(d, dtype=np.float32)
        state[f"{base}.layernorm_after.weight"] = np.ones(d, dtype=np.float32)
        state[f"{base}.layernorm_after.bias"] = np.zeros(d, dtype=np.float32)
        for name in ("query", "key", "value"):
            state[f"{base}.attention.attention.{name}.weight"] = mat(d, d)
            state[f"{base}.attention.attention.{name}.bias"] = mat(d, scale=0.01)
        state[f"{base}.attention.output.dense.weight"] = mat(d, d)
        state[f"{base}.attention.output.dense.bias"] = mat(d, scale=0.01)
        state[f"{base}.intermediate.dense.weight"] = mat(m, d)
        state[f"{base}.intermediate.dense.bias"] = mat(m, scale=0.01)
        state[f"{base}.output.dense.weight"] = mat(d, m)
        state[f"{base}.output.dense.bias"] = mat(d, scale=0.01)
    return state


# ---------------------------------------------------------------------------
# conversion


def _to_numpy(value, name: str) -> np.ndarray:
    arr = np.asarray(value.numpy() if hasattr(value, "numpy") else value)
    if not np.issubdtype(arr.dtype, np.floating):
        raise ExportError(
            f"source tensor {name!r} has non-floating dtype {arr.dtype}"
        )
    return arr.astype(np.float32)


def convert_tensor(arr: np.ndarray, convert: str, name: str) -> np.ndarray:
    if convert == "copy":
        return arr
    if convert == "linear_weight":
        # torch Linear stores (out, in); the manifest contract is x @ W
        return np.ascontiguousarray(arr.T)
    if convert == "conv_kernel":
        # (D, C, P, P) -> rows flattened as (row, col, channel), the same
        # order the consumer's patchify produces
        return np.ascontiguousarray(
            arr.transpose(2, 3, 1, 0).reshape(-1, arr.shape[0])
        )
    if convert in ("squeeze", "squeeze_first"):
        return np.ascontiguousarray(arr.reshape(arr.shape[-2], arr.shape[-1])
                                    if convert == "squeeze_first"
                                    else arr.reshape(arr.shape[-1]))
    raise ExportError(f"unknown conversion {convert!r} for {name!r}")


def map_state(state: dict, mapping: dict, cfg: dict) -> dict[str, np.ndarray]:
    rows = expand_mapping(mapping, cfg["layers"])
    missing = [row["source"] for row in rows if row["source"] not in state]
    if missing:
        raise ExportError(
            "source checkpoint is missing mapped tensors: "
            + ", ".join(sorted(missing))
        )
    out: dict[str, np.ndarray] = {}
    for row in rows:
        arr = _to_numpy(state[row["source"]], row["source"])
        out[row["target"]] = convert_tensor(arr, row["convert"], row["target"])
    # the contract has no patch-projection bias slot; the source conv bias
    # adds one fixed vector to every patch token, which is exactly what the
    # positional rows 1..N do, so it folds in there losslessly
    bias_key = "embeddings.patch_embeddings.projection.bias"
    if bias_key in state:
        bias = _to_numpy(state[bias_key], bias_key)
        out["embed/pos_table"] = out["embed/pos_table"].copy()
        out["embed/pos_table"][1:] += bias
    return out


def fixture_input(cfg: dict, seed: int = FIXTURE_SEED) -> np.ndarray:
    """Fixed seeded pseudo-random image in the standardized value range."""
    rng = np.random.default_rng(seed)
    shape = (cfg["image_size"], cfg["image_size"], cfg["channels"])
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)


def export(spec: ExportManifestSpec):
    """Writes the weight manifest and the fixture; returns their paths."""
    if spec.synthetic:
        cfg = {**BASE_CONFIG, **(spec.config or {})}
        state = synthetic_checkpoint(cfg, spec.seed)
    elif os.path.isdir(spec.source):
        state, cfg = load_local_checkpoint(spec.source)
    else:
        state, cfg = load_hub_checkpoint(spec.source)

    named = map_state(state, spec.mapping, cfg)
    os.makedirs(spec.out_dir, exist_ok=True)
    write_manifest(
        spec.manifest_path, named, model=cfg,
        norm=spec.mapping["normalization"],
        extra={"source": spec.source if not spec.synthetic else "synthetic",
               "synthetic": spec.synthetic, "seed": spec.seed},
    )

    image = fixture_input(cfg)
    pooled = pooled_features(state, cfg, image)
    write_manifest(
        spec.fixture_path,
        {"fixture/input": image, "fixture/pooled": pooled},
        model=cfg,
        extra={"kind": "fixture", "input_seed": FIXTURE_SEED},
    )
    return spec.manifest_path, spec.fixture_path
