import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitseq import kernels as K
from vitseq.bilstm import (
    BiLSTMWeights,
    LSTMCellParams,
    LSTMConfig,
    bilstm_forward,
    classify_sequence,
    lstm_cell_step,
    predicted_class,
)
from vitseq.errors import ConfigError, ShapeError
from vitseq.tensor import Tensor


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def cell_reference(x, h, c, w, r, b, u):
    """Loop-based oracle for one cell step. Gate order i, f, g, o."""
    pre = x @ w + h @ r + b
    h_out = np.zeros(u)
    c_out = np.zeros(u)
    for j in range(u):
        i_g = sigmoid(pre[j])
        f_g = sigmoid(pre[u + j])
        g_g = math.tanh(pre[2 * u + j])
        o_g = sigmoid(pre[3 * u + j])
        c_out[j] = f_g * c[j] + i_g * g_g
        h_out[j] = o_g * math.tanh(c_out[j])
    return h_out, c_out


def random_weights(cfg, seed):
    return BiLSTMWeights.init(cfg, seed)


class TestCell:
    def test_zero_everything(self):
        u, d = 3, 2
        p = LSTMCellParams(
            Tensor(np.zeros((d, 4 * u), dtype=np.float32)),
            Tensor(np.zeros((u, 4 * u), dtype=np.float32)),
            Tensor(np.zeros(4 * u, dtype=np.float32)),
        )
        h, c = lstm_cell_step(
            Tensor(np.ones(d, dtype=np.float32)),
            Tensor(np.zeros(u, dtype=np.float32)),
            Tensor(np.zeros(u, dtype=np.float32)),
            p,
        )
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(c.data, 0.0)

    def test_against_scalar_reference(self):
        rng = np.random.default_rng(0)
        u, d = 2, 3
        x = rng.normal(size=d)
        h = rng.normal(size=u)
        c = rng.normal(size=u)
        w = rng.normal(size=(d, 4 * u))
        r = rng.normal(size=(u, 4 * u))
        b = rng.normal(size=4 * u)
        h_ref, c_ref = cell_reference(x, h, c, w, r, b, u)
        p = LSTMCellParams(Tensor(w), Tensor(r), Tensor(b))
        h_out, c_out = lstm_cell_step(Tensor(x), Tensor(h), Tensor(c), p)
        np.testing.assert_allclose(h_out.data, h_ref, atol=1e-6)
        np.testing.assert_allclose(c_out.data, c_ref, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_hidden_state_bounded(self, seed):
        rng = np.random.default_rng(seed)
        u, d = 4, 3
        p = LSTMCellParams(
            Tensor(rng.normal(size=(d, 4 * u)).astype(np.float32)),
            Tensor(rng.normal(size=(u, 4 * u)).astype(np.float32)),
            Tensor(rng.normal(size=4 * u).astype(np.float32)),
        )
        h = Tensor(np.zeros(u, dtype=np.float32))
        c = Tensor(np.zeros(u, dtype=np.float32))
        for t in range(5):
            x = Tensor(rng.normal(scale=3.0, size=d).astype(np.float32))
            h, c = lstm_cell_step(x, h, c, p)
            # |h| = |o * tanh(c)| <= 1 elementwise, regardless of inputs
            assert np.abs(h.data).max() <= 1.0 + 1e-6


class TestForward:
    def test_output_width_is_twice_hidden(self):
        cfg = LSTMConfig()
        w = random_weights(cfg, 0)
        seq = np.random.default_rng(1).normal(size=(5, 768)).astype(np.float32)
        rep = bilstm_forward(seq, w, cfg)
        assert rep.shape == (128,)

    def test_sequence_oracle_from_cell_composition(self):
        cfg = LSTMConfig(layers=2, hidden_units=3, dropout=0.0, input_dim=4)
        w = random_weights(cfg, 2)
        rng = np.random.default_rng(3)
        seq = rng.normal(size=(5, 4)).astype(np.float32)

        def run_dir(rows, p, reverse):
            u = cfg.hidden_units
            h = np.zeros(u)
            c = np.zeros(u)
            order = reversed(range(len(rows))) if reverse else range(len(rows))
            states = [None] * len(rows)
            for t in order:
                h, c = cell_reference(rows[t], h, c, p.w.data.astype(np.float64),
                                      p.r.data.astype(np.float64),
                                      p.b.data.astype(np.float64), u)
                states[t] = h
            return states

        rows = [seq[t].astype(np.float64) for t in range(5)]
        for fwd_p, bwd_p in w.layers:
            fwd = run_dir(rows, fwd_p, reverse=False)
            bwd = run_dir(rows, bwd_p, reverse=True)
            rows = [np.concatenate([fwd[t], bwd[t]]) for t in range(5)]
        expected = np.concatenate([fwd[-1], bwd[0]])
        rep = bilstm_forward(seq, w, cfg)
        np.testing.assert_allclose(rep.data, expected, atol=1e-5)

    def test_direction_swap_symmetry_single_layer(self):
        # with one layer, reversing time and swapping the directions'
        # parameters swaps the two halves of the representation exactly
        cfg = LSTMConfig(layers=1, hidden_units=4, dropout=0.0, input_dim=3)
        w = random_weights(cfg, 4)
        seq = np.random.default_rng(5).normal(size=(6, 3)).astype(np.float32)
        rep = bilstm_forward(seq, w, cfg).data

        fwd, bwd = w.layers[0]
        swapped = BiLSTMWeights(cfg, [(bwd, fwd)], w.readout_w, w.readout_b)
        rep_swapped = bilstm_forward(seq[::-1].copy(), swapped, cfg).data
        u = cfg.hidden_units
        np.testing.assert_array_equal(rep_swapped[:u], rep[u:])
        np.testing.assert_array_equal(rep_swapped[u:], rep[:u])

    def test_zero_weights_zero_output(self):
        cfg = LSTMConfig(layers=2, hidden_units=3, dropout=0.0, input_dim=4)
        arrays = {}
        for i in range(2):
            in_dim = 4 if i == 0 else 6
            for tag in ("fwd", "bwd"):
                arrays[f"lstm{i}/{tag}/w"] = np.zeros((in_dim, 12), dtype=np.float32)
                arrays[f"lstm{i}/{tag}/r"] = np.zeros((3, 12), dtype=np.float32)
                arrays[f"lstm{i}/{tag}/b"] = np.zeros(12, dtype=np.float32)
        arrays["readout/w"] = np.zeros((6, 2), dtype=np.float32)
        arrays["readout/b"] = np.zeros(2, dtype=np.float32)
        w = BiLSTMWeights.from_arrays(cfg, arrays)
        seq = np.random.default_rng(6).normal(size=(4, 4)).astype(np.float32)
        rep = bilstm_forward(seq, w, cfg)
        np.testing.assert_array_equal(rep.data, 0.0)

    def test_input_width_mismatch(self):
        cfg = LSTMConfig(layers=1, hidden_units=2, input_dim=4)
        w = random_weights(cfg, 7)
        with pytest.raises(ShapeError):
            bilstm_forward(np.zeros((3, 5), dtype=np.float32), w, cfg)

    def test_dropout_deterministic_per_seed_and_off_at_eval(self):
        cfg = LSTMConfig(layers=3, hidden_units=4, dropout=0.5, input_dim=4)
        w = random_weights(cfg, 8)
        seq = np.random.default_rng(9).normal(size=(5, 4)).astype(np.float32)
        a = bilstm_forward(seq, w, cfg, training=True, rng_seed=(0, 1)).data
        b = bilstm_forward(seq, w, cfg, training=True, rng_seed=(0, 1)).data
        c = bilstm_forward(seq, w, cfg, training=True, rng_seed=(0, 2)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        # eval mode ignores dropout entirely
        d = bilstm_forward(seq, w, cfg, training=False).data
        e = bilstm_forward(seq, w, cfg, training=False, rng_seed=(9, 9)).data
        np.testing.assert_array_equal(d, e)
        assert not np.array_equal(a, d)

    def test_end_to_end_grad_check(self):
        cfg = LSTMConfig(layers=1, hidden_units=3, dropout=0.0, input_dim=6)
        w = random_weights(cfg, 10)
        rng = np.random.default_rng(11)
        seq = rng.normal(size=(4, 6)).astype(np.float32)
        label = 1
        worst = 0.0
        for name in ("lstm0/fwd/w", "lstm0/bwd/r", "lstm0/fwd/b", "readout/w"):
            original = w.named_tensors()[name]

            def f(t, _name=name):
                named = w.named_tensors()
                old = named[_name]
                if _name == "readout/w":
                    w.readout_w = t
                else:
                    self._swap(w, _name, t)
                try:
                    probs = classify_sequence(bilstm_forward(seq, w, cfg), w)
                    return K.sparse_ce_loss(K.reshape(probs, (1, 2)), [label])
                finally:
                    if _name == "readout/w":
                        w.readout_w = old
                    else:
                        self._swap(w, _name, old)

            worst = max(worst, K.grad_check(f, original))
        assert worst < 1e-3

    @staticmethod
    def _swap(w, name, tensor):
        i = int(name[4])
        tag, leaf = name.split("/")[1:]
        pair = list(w.layers[i])
        idx = 0 if tag == "fwd" else 1
        p = pair[idx]
        setattr(p, leaf, tensor)


class TestClassify:
    def test_known_logits(self):
        cfg = LSTMConfig(layers=1, hidden_units=1, input_dim=2)
        arrays = {
            "lstm0/fwd/w": np.zeros((2, 4), dtype=np.float32),
            "lstm0/fwd/r": np.zeros((1, 4), dtype=np.float32),
            "lstm0/fwd/b": np.zeros(4, dtype=np.float32),
            "lstm0/bwd/w": np.zeros((2, 4), dtype=np.float32),
            "lstm0/bwd/r": np.zeros((1, 4), dtype=np.float32),
            "lstm0/bwd/b": np.zeros(4, dtype=np.float32),
            "readout/w": np.eye(2, dtype=np.float32),
            "readout/b": np.array([2.0, 0.0], dtype=np.float32),
        }
        w = BiLSTMWeights.from_arrays(cfg, arrays)
        probs = classify_sequence(Tensor(np.zeros(2, dtype=np.float32)), w)
        # softmax([2, 0]) evaluated by hand
        e2 = math.exp(2.0)
        np.testing.assert_allclose(probs.data, [e2 / (e2 + 1), 1 / (e2 + 1)],
                                   atol=1e-5)
        np.testing.assert_allclose(probs.data, [0.88080, 0.11920], atol=1e-5)
        assert predicted_class(probs) == 0

    def test_probabilities_sum_to_one(self):
        cfg = LSTMConfig(layers=2, hidden_units=5, input_dim=3, num_classes=3)
        w = random_weights(cfg, 12)
        seq = np.random.default_rng(13).normal(size=(4, 3)).astype(np.float32)
        probs = classify_sequence(bilstm_forward(seq, w, cfg), w)
        assert probs.shape == (3,)
        assert abs(probs.data.sum() - 1.0) < 1e-5
        assert np.all(probs.data >= 0)

    def test_tie_breaks_low(self):
        assert predicted_class(Tensor(np.array([0.5, 0.5]))) == 0

    def test_wrong_rep_width(self):
        cfg = LSTMConfig(layers=1, hidden_units=2, input_dim=3)
        w = random_weights(cfg, 14)
        with pytest.raises(ShapeError):
            classify_sequence(Tensor(np.zeros(5, dtype=np.float32)), w)


class TestConfigAndInit:
    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            LSTMConfig(layers=0)
        with pytest.raises(ConfigError):
            LSTMConfig(dropout=1.0)
        with pytest.raises(ConfigError):
            LSTMConfig(num_classes=4)

    def test_forget_gate_bias(self):
        cfg = LSTMConfig(layers=2, hidden_units=3, input_dim=4)
        w = random_weights(cfg, 15)
        u = cfg.hidden_units
        for fwd, bwd in w.layers:
            for p in (fwd, bwd):
                np.testing.assert_array_equal(p.b.data[u:2 * u], 1.0)
                np.testing.assert_array_equal(p.b.data[:u], 0.0)
                np.testing.assert_array_equal(p.b.data[2 * u:], 0.0)

    def test_init_deterministic(self):
        cfg = LSTMConfig(layers=2, hidden_units=3, input_dim=4)
        a = random_weights(cfg, (0, 1)).named_tensors()
        b = random_weights(cfg, (0, 1)).named_tensors()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_default_param_shapes(self):
        cfg = LSTMConfig()
        w = random_weights(cfg, 16)
        named = w.named_tensors()
        assert named["lstm0/fwd/w"].shape == (768, 256)
        assert named["lstm1/fwd/w"].shape == (128, 256)
        assert named["readout/w"].shape == (128, 2)
        assert len(w.layers) == 6

    def test_shape_audit(self):
        cfg = LSTMConfig(layers=1, hidden_units=2, input_dim=3)
        w = random_weights(cfg, 17)
        arrays = {n: t.data for n, t in w.named_tensors().items()}
        arrays["lstm0/fwd/r"] = np.zeros((3, 8), dtype=np.float32)
        with pytest.raises(ShapeError, match="lstm0/fwd"):
            BiLSTMWeights.from_arrays(cfg, arrays)
