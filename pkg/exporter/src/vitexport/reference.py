"""Reference forward pass over a source-format state dict, in torch.

This is the oracle side of the fixture: it consumes the checkpoint in its
original layout (torch Linear/Conv2d conventions, pre-norm blocks, exact
GELU, tanh pooler) without going through the exported manifest, so a match
against the consumer's numpy pipeline checks both the name mapping and the
math.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F


@torch.no_grad()
def pooled_features(state: dict, cfg: dict, image: np.ndarray) -> np.ndarray:
    """``image`` is H x W x C float32; returns the pooled feature vector."""
    heads = cfg["heads"]
    layers = cfg["layers"]
    d = cfg["hidden_size"]
    dh = d // heads
    p = cfg["patch_size"]

    t = {k: torch.as_tensor(v, dtype=torch.float32) for k, v in state.items()}
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]

    tokens = F.conv2d(
        x, t["embeddings.patch_embeddings.projection.weight"],
        t["embeddings.patch_embeddings.projection.bias"], stride=p,
    )                                     # 1 x D x H/P x W/P, raster order
    tokens = tokens.flatten(2).transpose(1, 2)
    tokens = torch.cat([t["embeddings.cls_token"], tokens], dim=1)
    tokens = tokens + t["embeddings.position_embeddings"]

    def linear(z, prefix):
        return F.linear(z, t[f"{prefix}.weight"], t[f"{prefix}.bias"])

    def layer_norm(z, prefix):
        return F.layer_norm(z, (d,), t[f"{prefix}.weight"],
                            t[f"{prefix}.bias"], eps=1e-5)

    n_tok = tokens.shape[1]
    for i in range(layers):
        base = f"encoder.layer.{i}"
        normed = layer_norm(tokens, f"{base}.layernorm_before")
        q = linear(normed, f"{base}.attention.attention.query")
        k = linear(normed, f"{base}.attention.attention.key")
        v = linear(normed, f"{base}.attention.attention.value")

        def split(z):
            return z.view(1, n_tok, heads, dh).transpose(1, 2)

        scores = split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh)
        ctx = torch.softmax(scores, dim=-1) @ split(v)
        ctx = ctx.transpose(1, 2).reshape(1, n_tok, d)
        tokens = tokens + linear(ctx, f"{base}.attention.output.dense")

        normed = layer_norm(tokens, f"{base}.layernorm_after")
        hidden = F.gelu(linear(normed, f"{base}.intermediate.dense"))
        tokens = tokens + linear(hidden, f"{base}.output.dense")

    cls = layer_norm(tokens, "layernorm")[0, 0]
    pooled = torch.tanh(F.linear(cls, t["pooler.dense.weight"],
                                 t["pooler.dense.bias"]))
    return pooled.numpy().astype(np.float32)
