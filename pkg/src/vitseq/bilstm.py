"""Stacked bidirectional LSTM over a slice-feature sequence, ending in a
softmax readout over the concatenated final forward / first-step backward
hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class LSTMConfig:
    layers: int = 6
    hidden_units: int = 64
    dropout: float = 0.15
    input_dim: int = 768
    num_classes: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("LSTMConfig.layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("LSTMConfig.dropout must be in [0, 1)")
        if self.num_classes not in (2, 3):
            raise ConfigError("LSTMConfig.num_classes must be 2 or 3")
        if self.hidden_units < 1 or self.input_dim < 1:
            raise ConfigError("hidden_units and input_dim must be positive")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "hidden_units": self.hidden_units,
            "dropout": self.dropout,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
        }


@dataclass
class LSTMCellParams:
    """One direction of one layer. Gate order along 4U: i, f, g, o."""

    w: Tensor  # in_dim x 4U
    r: Tensor  # U x 4U
    b: Tensor  # 4U


@dataclass
class BiLSTMWeights:
    cfg: LSTMConfig
    layers: list[tuple[LSTMCellParams, LSTMCellParams]] = field(repr=False)
    readout_w: Tensor = field(repr=False)
    readout_b: Tensor = field(repr=False)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (fwd, bwd) in enumerate(self.layers):
            for tag, p in (("fwd", fwd), ("bwd", bwd)):
                out[f"lstm{i}/{tag}/w"] = p.w
                out[f"lstm{i}/{tag}/r"] = p.r
                out[f"lstm{i}/{tag}/b"] = p.b
        out["readout/w"] = self.readout_w
        out["readout/b"] = self.readout_b
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = flag

    @classmethod
    def from_arrays(cls, cfg: LSTMConfig, arrays: dict[str, np.ndarray]) -> "BiLSTMWeights":
        u = cfg.hidden_units
        layers = []
        for i in range(cfg.layers):
            in_dim = cfg.input_dim if i == 0 else 2 * u
            pair = []
            for tag in ("fwd", "bwd"):
                w = arrays[f"lstm{i}/{tag}/w"]
                r = arrays[f"lstm{i}/{tag}/r"]
                b = arrays[f"lstm{i}/{tag}/b"]
                if w.shape != (in_dim, 4 * u) or r.shape != (u, 4 * u) or b.shape != (4 * u,):
                    raise ShapeError(
                        f"lstm{i}/{tag} shapes {w.shape}/{r.shape}/{b.shape} "
                        f"inconsistent with input {in_dim}, hidden {u}"
                    )
                pair.append(LSTMCellParams(Tensor(w), Tensor(r), Tensor(b)))
            layers.append((pair[0], pair[1]))
        rw = arrays["readout/w"]
        rb = arrays["readout/b"]
        if rw.shape != (2 * u, cfg.num_classes) or rb.shape != (cfg.num_classes,):
            raise ShapeError(
                f"readout shapes {rw.shape}/{rb.shape} inconsistent with "
                f"hidden {u} and {cfg.num_classes} classes"
            )
        return cls(cfg, layers, Tensor(rw), Tensor(rb))

    @classmethod
    def init(cls, cfg: LSTMConfig, seed: int) -> "BiLSTMWeights":
        """Xavier-uniform matrices, zero biases except forget gate at +1."""
        rng = np.random.default_rng(seed)
        u = cfg.hidden_units

        def xavier(fan_in, fan_out, *shape):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape).astype(np.float32)

        arrays: dict[str, np.ndarray] = {}
        for i in range(cfg.layers):
            in_dim = cfg.input_dim if i == 0 else 2 * u
            for tag in ("fwd", "bwd"):
                arrays[f"lstm{i}/{tag}/w"] = xavier(in_dim, 4 * u, in_dim, 4 * u)
                arrays[f"lstm{i}/{tag}/r"] = xavier(u, 4 * u, u, 4 * u)
                b = np.zeros(4 * u, dtype=np.float32)
                b[u:2 * u] = 1.0
                arrays[f"lstm{i}/{tag}/b"] = b
        arrays["readout/w"] = xavier(2 * u, cfg.num_classes, 2 * u, cfg.num_classes)
        arrays["readout/b"] = np.zeros(cfg.num_classes, dtype=np.float32)
        return cls.from_arrays(cfg, arrays)


# ---------------------------------------------------------------------------
# forward pass


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LSTMCellParams):
    """One recurrence step; returns (h_t, c_t)."""
    return K.lstm_cell(x_t, h_prev, c_prev, p.w, p.r, p.b)


def _run_direction(rows: list[Tensor], p: LSTMCellParams, u: int, reverse: bool):
    """Hidden states aligned with time index t, zero initial state."""
    order = range(len(rows) - 1, -1, -1) if reverse else range(len(rows))
    h = Tensor.zeros(u, dtype=rows[0].dtype)
    c = Tensor.zeros(u, dtype=rows[0].dtype)
    states: list[Tensor] = [None] * len(rows)  # type: ignore[list-item]
    for t in order:
        h, c = lstm_cell_step(rows[t], h, c, p)
        states[t] = h
    return states


def _dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(t.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return K.mul(t, Tensor(keep.astype(t.data.dtype)))


def bilstm_forward(
    seq,
    w: BiLSTMWeights,
    cfg: LSTMConfig,
    training: bool = False,
    rng_seed=0,
) -> Tensor:
    """Sequence representation of width 2U: final forward hidden state
    concatenated with the first-step backward hidden state of the last
    layer. Dropout only between stacked layers and only when training."""
    x = seq if isinstance(seq, Tensor) else Tensor(np.asarray(seq, dtype=np.float32))
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(
            f"sequence shape {x.shape} does not match input_dim {cfg.input_dim}"
        )
    rng = np.random.default_rng(rng_seed)
    u = cfg.hidden_units
    t_len = x.shape[0]
    layer_input = x
    fwd_states = bwd_states = None
    for i, (fwd_p, bwd_p) in enumerate(w.layers):
        rows = [K.take_row(layer_input, t) for t in range(t_len)]
        fwd_states = _run_direction(rows, fwd_p, u, reverse=False)
        bwd_states = _run_direction(rows, bwd_p, u, reverse=True)
        if i + 1 < cfg.layers:
            step_rows = [
                K.reshape(K.concat([fwd_states[t], bwd_states[t]], axis=0), (1, 2 * u))
                for t in range(t_len)
            ]
            layer_input = K.concat(step_rows, axis=0)
            if training and cfg.dropout > 0.0:
                layer_input = _dropout(layer_input, cfg.dropout, rng)
    return K.concat([fwd_states[-1], bwd_states[0]], axis=0)


def classify_sequence(rep: Tensor, w: BiLSTMWeights) -> Tensor:
    """Class probabilities from a 2U representation."""
    u2 = w.readout_w.shape[0]
    if rep.shape != (u2,):
        raise ShapeError(f"representation shape {rep.shape}, expected ({u2},)")
    logits = K.add(
        K.reshape(K.matmul(K.reshape(rep, (1, u2)), w.readout_w),
                  (w.readout_b.shape[0],)),
        w.readout_b,
    )
    return K.softmax_lastdim(logits)


def predicted_class(probabilities: Tensor) -> int:
    """Argmax with ties broken toward the lowest class index."""
    return int(np.argmax(probabilities.data))
