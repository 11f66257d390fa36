"""Vision Transformer encoder: one 2D slice image in, one pooled feature
vector out. Weights are immutable after load and frozen by default; the
whole per-slice forward pass is built from the kernels in kernels.py so a
fine-tuning run can backpropagate into the encoder when asked to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    layers: int = 12
    hidden_size: int = 768
    mlp_size: int = 3072
    heads: int = 12
    feature_dim: int = 768
    pooler_tanh: bool = True

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "layers",
                     "hidden_size", "mlp_size", "heads", "feature_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ViTConfig.{name} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size "
                f"{self.patch_size}"
            )
        if self.hidden_size % self.heads != 0:
            raise ConfigError(
                f"hidden size {self.hidden_size} not divisible by "
                f"{self.heads} heads"
            )

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "channels": self.channels,
            "layers": self.layers,
            "hidden_size": self.hidden_size,
            "mlp_size": self.mlp_size,
            "heads": self.heads,
            "feature_dim": self.feature_dim,
            "pooler_tanh": self.pooler_tanh,
        }


_LAYER_PARTS = (
    ("ln1/gamma", "d"), ("ln1/beta", "d"),
    ("attn/wq", "dd"), ("attn/bq", "d"),
    ("attn/wk", "dd"), ("attn/bk", "d"),
    ("attn/wv", "dd"), ("attn/bv", "d"),
    ("attn/wo", "dd"), ("attn/bo", "d"),
    ("ln2/gamma", "d"), ("ln2/beta", "d"),
    ("mlp/w1", "dm"), ("mlp/b1", "m"),
    ("mlp/w2", "md"), ("mlp/b2", "d"),
)


def vit_tensor_spec(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """The tensor-name contract: every name a manifest must provide, with
    the exact shape implied by the config."""
    d, m = cfg.hidden_size, cfg.mlp_size
    shapes = {"d": (d,), "m": (m,), "dd": (d, d), "dm": (d, m), "md": (m, d)}
    spec: dict[str, tuple[int, ...]] = {
        "embed/patch_kernel": (cfg.channels * cfg.patch_size ** 2, d),
        "embed/cls_token": (d,),
        "embed/pos_table": (cfg.num_tokens, d),
    }
    for i in range(cfg.layers):
        for part, kind in _LAYER_PARTS:
            spec[f"layer{i}/{part}"] = shapes[kind]
    spec["final_ln/gamma"] = (d,)
    spec["final_ln/beta"] = (d,)
    spec["pooler/w"] = (d, cfg.feature_dim)
    spec["pooler/b"] = (cfg.feature_dim,)
    return spec


@dataclass
class ViTWeights:
    """Named-tensor container audited against vit_tensor_spec."""

    cfg: ViTConfig
    tensors: dict[str, Tensor] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        spec = vit_tensor_spec(self.cfg)
        for name, shape in spec.items():
            if name not in self.tensors:
                raise ShapeError(f"missing ViT tensor {name!r}")
            got = self.tensors[name].shape
            if got != shape:
                raise ShapeError(
                    f"ViT tensor {name!r} has shape {got}, expected {shape}"
                )
        extra = set(self.tensors) - set(spec)
        if extra:
            raise ShapeError(f"unexpected ViT tensors: {sorted(extra)}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layer{i}/"
        return {
            name[len(prefix):]: t
            for name, t in self.tensors.items()
            if name.startswith(prefix)
        }

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @classmethod
    def from_arrays(cls, cfg: ViTConfig, arrays: dict[str, np.ndarray]) -> "ViTWeights":
        return cls(cfg, {n: Tensor(a) for n, a in arrays.items()})

    @classmethod
    def random(cls, cfg: ViTConfig, seed: int, scale: float = 0.02) -> "ViTWeights":
        """Seeded random initialization; LayerNorm gains start at 1."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in vit_tensor_spec(cfg).items():
            leaf = name.rsplit("/", 1)[-1]
            if leaf == "gamma":
                arr = np.ones(shape, dtype=np.float32)
            elif leaf == "beta" or leaf.startswith("b"):
                arr = np.zeros(shape, dtype=np.float32)
            else:
                arr = rng.normal(0.0, scale, size=shape).astype(np.float32)
            tensors[name] = Tensor(arr)
        return cls(cfg, tensors)


# ---------------------------------------------------------------------------
# forward-pass operations


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an HxWxC image into non-overlapping PxP patches in raster
    order (left-to-right, top-to-bottom); each row is one flattened patch."""
    if image.ndim != 3:
        raise ShapeError(f"expected an HxWxC image, got shape {image.shape}")
    h, w, c = image.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    grid = image.reshape(h // p, p, w // p, p, c)
    return np.ascontiguousarray(
        grid.transpose(0, 2, 1, 3, 4).reshape((h // p) * (w // p), p * p * c)
    )


def unpatchify(patches: np.ndarray, h: int, w: int, c: int, patch_size: int) -> np.ndarray:
    """Inverse of patchify; used to verify the raster ordering."""
    p = patch_size
    grid = patches.reshape(h // p, w // p, p, p, c)
    return np.ascontiguousarray(grid.transpose(0, 2, 1, 3, 4).reshape(h, w, c))


def embed_tokens(patches, w: ViTWeights) -> Tensor:
    """Project flattened patches and prepend the class token: rows are
    [cls, x1 E, ..., xN E]."""
    pt = patches if isinstance(patches, Tensor) else Tensor(patches)
    kernel = w["embed/patch_kernel"]
    if pt.shape[-1] != kernel.shape[0]:
        raise ShapeError(
            f"patch width {pt.shape[-1]} does not match projection input "
            f"{kernel.shape[0]}"
        )
    projected = K.matmul(pt, kernel)
    cls_row = K.reshape(w["embed/cls_token"], (1, kernel.shape[1]))
    return K.concat([cls_row, projected], axis=0)


def add_positional(z: Tensor, w: ViTWeights) -> Tensor:
    pos = w["embed/pos_table"]
    if z.shape != pos.shape:
        raise ShapeError(
            f"token matrix {z.shape} does not match positional table {pos.shape}"
        )
    return K.add(z, pos)


def msa(z: Tensor, layer: dict[str, Tensor], heads: int, return_weights: bool = False):
    """Multi-head self-attention sublayer over all tokens."""
    return K.attention(
        z,
        layer["attn/wq"], layer["attn/bq"],
        layer["attn/wk"], layer["attn/bk"],
        layer["attn/wv"], layer["attn/bv"],
        layer["attn/wo"], layer["attn/bo"],
        heads,
        return_weights=return_weights,
    )


def mlp(z: Tensor, layer: dict[str, Tensor]) -> Tensor:
    hidden = K.gelu(K.add(K.matmul(z, layer["mlp/w1"]), layer["mlp/b1"]))
    return K.add(K.matmul(hidden, layer["mlp/w2"]), layer["mlp/b2"])


def encoder_block(z_prev: Tensor, layer: dict[str, Tensor], heads: int) -> Tensor:
    """Pre-norm transformer block: attention then MLP, each residual."""
    z_mid = K.add(
        msa(K.layer_norm(z_prev, layer["ln1/gamma"], layer["ln1/beta"]), layer, heads),
        z_prev,
    )
    return K.add(
        mlp(K.layer_norm(z_mid, layer["ln2/gamma"], layer["ln2/beta"]), layer),
        z_mid,
    )


def encode(image, cfg: ViTConfig, w: ViTWeights) -> Tensor:
    """Full encoder stack: image -> final token matrix (N+1) x D."""
    patches = image if isinstance(image, Tensor) else patchify(
        np.asarray(image, dtype=np.float32), cfg.patch_size
    )
    z = add_positional(embed_tokens(patches, w), w)
    for i in range(cfg.layers):
        z = encoder_block(z, w.layer(i), cfg.heads)
    return z


def pooler_features(z_last: Tensor, w: ViTWeights, use_tanh: bool | None = None) -> Tensor:
    """Final LayerNorm of the class-token row, then the pooler projection."""
    y = K.layer_norm(K.take_row(z_last, 0), w["final_ln/gamma"], w["final_ln/beta"])
    out = K.add(
        K.reshape(K.matmul(K.reshape(y, (1, y.shape[0])), w["pooler/w"]),
                  (w["pooler/b"].shape[0],)),
        w["pooler/b"],
    )
    if use_tanh is None:
        use_tanh = w.cfg.pooler_tanh
    return K.tanh(out) if use_tanh else out


def slice_features(image, cfg: ViTConfig, w: ViTWeights) -> Tensor:
    return pooler_features(encode(image, cfg, w), w)


def extract_slice_features(
    slices, cfg: ViTConfig, w: ViTWeights, expected_count: int | None = None
) -> np.ndarray:
    """Feature matrix for a whole volume: row t is the pooled feature of
    slice t, in anatomical (inferior -> superior) order."""
    slices = list(slices)
    if expected_count is not None and len(slices) != expected_count:
        raise DataError(
            f"expected {expected_count} slices, got {len(slices)}"
        )
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    rows = np.empty((len(slices), cfg.feature_dim), dtype=np.float32)
    for t, img in enumerate(slices):
        arr = np.asarray(img, dtype=np.float32)
        if arr.shape != want:
            raise DataError(f"slice {t}: shape {arr.shape}, expected {want}")
        rows[t] = slice_features(arr, cfg, w).data
    return rows


def extract_slice_features_traced(slices, cfg: ViTConfig, w: ViTWeights) -> Tensor:
    """Differentiable variant used when fine-tuning the encoder."""
    rows = [K.reshape(slice_features(img, cfg, w), (1, cfg.feature_dim))
            for img in slices]
    return K.concat(rows, axis=0)
