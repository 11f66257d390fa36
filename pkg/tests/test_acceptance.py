"""Acceptance gate: one test per release criterion, each emitting a single
pass/fail line so a suite run doubles as a checklist."""

import json
import time

import numpy as np
import pytest

from vitseq import kernels as K
from vitseq.bilstm import (
    BiLSTMWeights,
    LSTMConfig,
    bilstm_forward,
    classify_sequence,
    lstm_cell_step,
)
from vitseq.checks import gradient_suite
from vitseq.manifest import (
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    save_tensors,
)
from vitseq.tensor import Tensor
from vitseq.train import (
    AdamConfig,
    AdamState,
    TrainConfig,
    adam_step,
    evaluate_head,
    fit,
    kfold_split,
    train_head,
)
from vitseq.vit import (
    ViTConfig,
    ViTWeights,
    encoder_block,
    extract_slice_features,
    msa,
    patchify,
)
from vitseq.volume import (
    SynthConfig,
    Volume,
    VolumeHeader,
    load_volume,
    synth_dataset,
    volume_to_slices,
    write_volume,
)
from vitseq.metrics import ConfusionMatrix, metrics


def verdict(name, ok):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    assert ok, name


def test_gradient_suite():
    started = time.monotonic()
    res32 = gradient_suite(float64=False)
    res64 = gradient_suite(float64=True)
    elapsed = time.monotonic() - started
    ok = (all(v < 1e-3 for v in res32.values())
          and all(v < 1e-5 for v in res64.values())
          and elapsed < 60.0)
    verdict(
        f"gradient suite: 9 kernels x 5 seeds, worst 32-bit "
        f"{max(res32.values()):.2e} < 1e-3, worst 64-bit "
        f"{max(res64.values()):.2e} < 1e-5, {elapsed:.1f}s < 60s",
        ok,
    )


def test_shape_and_normalization_suite():
    patches = patchify(np.zeros((224, 224, 3), dtype=np.float32), 16)
    cfg = ViTConfig(layers=1)
    w = ViTWeights.random(cfg, seed=0)
    tokens = K.concat(
        [K.reshape(w["embed/cls_token"], (1, 768)),
         K.matmul(Tensor(patches), w["embed/patch_kernel"])], axis=0
    )
    toy = ViTConfig(image_size=32, patch_size=16, layers=1, hidden_size=8,
                    mlp_size=16, heads=2, feature_dim=8)
    tw = ViTWeights.random(toy, seed=1)
    z = Tensor(np.random.default_rng(2).normal(size=(5, 8)).astype(np.float32))
    _, attn = msa(z, tw.layer(0), toy.heads, return_weights=True)
    attn_ok = np.abs(attn.data.sum(axis=-1) - 1.0).max() < 1e-5
    sm = K.softmax_lastdim(Tensor(np.random.default_rng(3)
                                  .normal(size=(4, 7)).astype(np.float32)))
    sm_ok = np.abs(sm.data.sum(axis=-1) - 1.0).max() < 1e-5

    lstm_cfg = LSTMConfig()
    head = BiLSTMWeights.init(lstm_cfg, 0)
    seq = np.random.default_rng(4).normal(size=(5, 768)).astype(np.float32)
    rep = bilstm_forward(seq, head, lstm_cfg)
    probs = classify_sequence(rep, head)
    ok = (patches.shape[0] == 196 and tokens.shape == (197, 768)
          and sm_ok and attn_ok and rep.shape == (128,)
          and abs(probs.data.sum() - 1.0) < 1e-6)
    verdict(
        "shape/normalization suite: 196 patches, 197x768 tokens, softmax and "
        "attention rows sum to 1 +/- 1e-5, 128-dim representation, "
        "probabilities sum to 1 +/- 1e-6",
        ok,
    )


def test_symmetry_suite():
    toy = ViTConfig(image_size=32, patch_size=16, layers=1, hidden_size=8,
                    mlp_size=16, heads=2, feature_dim=8)
    w = ViTWeights.random(toy, seed=0)
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 8)).astype(np.float32)
    perm = rng.permutation(6)
    out = msa(Tensor(z), w.layer(0), toy.heads).data
    out_p = msa(Tensor(z[perm]), w.layer(0), toy.heads).data
    msa_ok = np.abs(out_p - out[perm]).max() < 1e-5

    zeroed = ViTWeights.random(toy, seed=2)
    for name, t in zeroed.named_tensors().items():
        if name.startswith("layer"):
            leaf = name.rsplit("/", 1)[-1]
            t.data = (np.ones_like(t.data) if leaf == "gamma"
                      else np.zeros_like(t.data))
    x = rng.normal(size=(5, 8)).astype(np.float32)
    residual_ok = np.array_equal(
        encoder_block(Tensor(x), zeroed.layer(0), toy.heads).data, x
    )

    lstm_cfg = LSTMConfig(layers=1, hidden_units=4, dropout=0.0, input_dim=3)
    head = BiLSTMWeights.init(lstm_cfg, 3)
    seq = rng.normal(size=(6, 3)).astype(np.float32)
    rep = bilstm_forward(seq, head, lstm_cfg).data
    fwd, bwd = head.layers[0]
    swapped = BiLSTMWeights(lstm_cfg, [(bwd, fwd)], head.readout_w,
                            head.readout_b)
    rep_sw = bilstm_forward(seq[::-1].copy(), swapped, lstm_cfg).data
    u = lstm_cfg.hidden_units
    swap_ok = (np.array_equal(rep_sw[:u], rep[u:])
               and np.array_equal(rep_sw[u:], rep[:u]))
    verdict(
        "symmetry suite: MSA permutation equivariance < 1e-5, residual "
        "identity exact under zero block weights, direction-swap/reversal "
        "symmetry exact",
        msa_ok and residual_ok and swap_ok,
    )


def test_oracle_suite():
    # lstm cell vs scalar brute force at U=2
    rng = np.random.default_rng(0)
    u, d = 2, 3
    x, h, c = rng.normal(size=d), rng.normal(size=u), rng.normal(size=u)
    wm, rm, bm = (rng.normal(size=(d, 4 * u)), rng.normal(size=(u, 4 * u)),
                  rng.normal(size=4 * u))
    pre = x @ wm + h @ rm + bm
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    c_ref = sig(pre[u:2 * u]) * c + sig(pre[:u]) * np.tanh(pre[2 * u:3 * u])
    h_ref = sig(pre[3 * u:]) * np.tanh(c_ref)
    from vitseq.bilstm import LSTMCellParams
    h_out, c_out = lstm_cell_step(Tensor(x), Tensor(h), Tensor(c),
                                  LSTMCellParams(Tensor(wm), Tensor(rm), Tensor(bm)))
    cell_ok = (np.abs(h_out.data - h_ref).max() < 1e-6
               and np.abs(c_out.data - c_ref).max() < 1e-6)

    # encoder block vs step-by-step kernel composition
    toy = ViTConfig(image_size=32, patch_size=16, layers=1, hidden_size=8,
                    mlp_size=16, heads=2, feature_dim=8)
    w = ViTWeights.random(toy, seed=1)
    layer = w.layer(0)
    z = Tensor(np.random.default_rng(2).normal(size=(3, 8)).astype(np.float32))
    normed = K.layer_norm(z, layer["ln1/gamma"], layer["ln1/beta"])
    attended = K.attention(normed, layer["attn/wq"], layer["attn/bq"],
                           layer["attn/wk"], layer["attn/bk"],
                           layer["attn/wv"], layer["attn/bv"],
                           layer["attn/wo"], layer["attn/bo"], toy.heads)
    z_mid = K.add(attended, z)
    hidden = K.gelu(K.add(K.matmul(
        K.layer_norm(z_mid, layer["ln2/gamma"], layer["ln2/beta"]),
        layer["mlp/w1"]), layer["mlp/b1"]))
    composed = K.add(K.add(K.matmul(hidden, layer["mlp/w2"]),
                           layer["mlp/b2"]), z_mid)
    block_ok = np.abs(
        encoder_block(z, layer, toy.heads).data - composed.data
    ).max() < 1e-6

    # adam vs straight-line float64 reference
    cfg = AdamConfig(learning_rate=3e-3)
    x0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(8)]
    xr = x0.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    p = Tensor(x0.copy())
    state = AdamState.init({"p": p})
    adam_ok = True
    for t, g in enumerate(grads, start=1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        xr = xr - cfg.learning_rate * (m / (1 - cfg.beta1 ** t)) / (
            np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.epsilon)
        adam_step({"p": p}, {"p": g}, state, cfg)
        adam_ok = adam_ok and np.abs(p.data - xr).max() < 1e-7

    r = metrics(ConfusionMatrix(2, np.array([[8, 2], [1, 9]], dtype=np.int64)))
    metrics_ok = (round(r.accuracy, 5) == 0.85
                  and round(r.recall_sensitivity, 5) == 0.9
                  and round(r.specificity, 5) == 0.8
                  and round(r.precision, 5) == round(9 / 11, 5)
                  and round(r.f1, 5) == 0.85714)
    verdict(
        "oracle suite: lstm cell < 1e-6, encoder block < 1e-6, adam < 1e-7, "
        "metrics exact at 5 decimals on TP=9/FN=1/TN=8/FP=2",
        cell_ok and block_ok and adam_ok and metrics_ok,
    )


def test_overfit_toy_pipeline():
    started = time.monotonic()
    vit_cfg = ViTConfig(image_size=32, patch_size=8, channels=3, layers=2,
                        hidden_size=32, mlp_size=64, heads=4, feature_dim=32)
    encoder = ViTWeights.random(vit_cfg, seed=0)
    # blob amplitude 0.5 against noise std 0.1: 5x separation
    ds = synth_dataset(20, 2, SynthConfig(noise_std=0.1, amplitude=0.5), seed=0)
    feats = []
    labels = []
    for s in ds.samples:
        imgs = volume_to_slices(s.volume, vit_cfg, 8)
        feats.append(extract_slice_features(imgs, vit_cfg, encoder))
        labels.append(s.label)
    lstm_cfg = LSTMConfig(layers=1, hidden_units=16, dropout=0.0, input_dim=32)
    adam_cfg = AdamConfig(learning_rate=1e-3)

    def train_until_perfect():
        head = state = None
        for chunk_end in range(10, 201, 10):
            head, state, _ = train_head(
                feats, labels, lstm_cfg, adam_cfg, epochs=chunk_end,
                batch_size=5, seed=0, start_epoch=chunk_end - 10,
                weights=head, adam_state=state,
            )
            preds, _ = evaluate_head(feats, labels, head, lstm_cfg)
            if preds == labels:
                return chunk_end, head
        return None, head

    epoch, head = train_until_perfect()
    elapsed = time.monotonic() - started
    epoch2, head2 = train_until_perfect()
    identical = epoch == epoch2 and all(
        np.array_equal(a.data, b.data)
        for a, b in zip(head.named_tensors().values(),
                        head2.named_tensors().values())
    )
    ok = epoch is not None and epoch <= 200 and elapsed < 300 and identical
    verdict(
        f"overfit test: toy encoder + 1-layer head reaches 100% training "
        f"accuracy by epoch {epoch} <= 200 in {elapsed:.1f}s < 300s, "
        f"bit-identical on rerun",
        ok,
    )


def test_protocol_suite(tmp_path):
    folds = kfold_split(100, 10, seed=0)
    fold_ok = (len(folds) == 10 and all(len(f) == 10 for f in folds)
               and np.array_equal(np.sort(np.concatenate(folds)),
                                  np.arange(100)))

    rng = np.random.default_rng(0)
    from vitseq.volume import Dataset, Sample
    samples = [
        Sample(sid=f"s{i}", label=i % 2,
               features=((i % 2) - 0.5
                         + 0.1 * rng.normal(size=(3, 8))).astype(np.float32))
        for i in range(12)
    ]
    cfg = TrainConfig(epochs=3, batch_size=4, folds=3, seed=0)
    lstm_cfg = LSTMConfig(layers=1, hidden_units=4, dropout=0.0, input_dim=8)
    report_a = fit(Dataset(samples), cfg, lstm_cfg, AdamConfig(0.01))
    report_b = fit(Dataset(samples), cfg, lstm_cfg, AdamConfig(0.01))
    leakage_ok = all(
        set(fr["train_indices"]).isdisjoint(fr["eval_indices"])
        for fr in report_a.fold_results
    )
    byte_ok = report_a.to_json() == report_b.to_json()
    verdict(
        "protocol suite: kfold(100, 10) is a disjoint cover, no train/eval "
        "leakage, identical runs serialize byte-identically",
        fold_ok and leakage_ok and byte_ok,
    )


def test_persistence_suite(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(VolumeHeader((3, 4, 5)),
                 rng.normal(size=(3, 4, 5)).astype(np.float32))
    vpath = tmp_path / "v.bvol"
    write_volume(vol, vpath)
    bvol_ok = load_volume(vpath).voxels.tobytes() == vol.voxels.tobytes()

    named = {"a": rng.normal(size=(4, 4)).astype(np.float32),
             "b": rng.normal(size=7).astype(np.float32)}
    wpath = tmp_path / "w.wman"
    save_tensors(wpath, named)
    man = load_manifest(wpath)
    wman_ok = all(man.tensors[n].tobytes() == a.tobytes()
                  for n, a in named.items())

    lstm_cfg = LSTMConfig(layers=1, hidden_units=4, dropout=0.0, input_dim=8)
    feats = [((i % 2) - 0.5 + 0.1 * rng.normal(size=(3, 8))).astype(np.float32)
             for i in range(8)]
    labels = [i % 2 for i in range(8)]
    adam = AdamConfig(0.01)
    _, _, full = train_head(feats, labels, lstm_cfg, adam, epochs=6,
                            batch_size=4, seed=1)
    head, state, first = train_head(feats, labels, lstm_cfg, adam, epochs=3,
                                    batch_size=4, seed=1)
    cpath = tmp_path / "c.wman"
    save_checkpoint(cpath, head, seed=1, epoch=3, adam_state=state,
                    adam_cfg=adam)
    back, extra, back_state = load_checkpoint(cpath, require_resume=True)
    _, _, rest = train_head(feats, labels, lstm_cfg, adam, epochs=6,
                            batch_size=4, seed=1, start_epoch=extra["epoch"],
                            weights=back, adam_state=back_state)
    resume_ok = first + rest == full
    verdict(
        "persistence suite: BVOL and WMAN round trips bit-exact, checkpoint "
        "resume reproduces the uninterrupted loss trajectory exactly",
        bvol_ok and wman_ok and resume_ok,
    )
