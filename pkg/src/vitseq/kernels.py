"""Differentiable numeric kernels.

All functions take and return Tensor (see tensor.py), record the trace
needed for reverse-mode gradients, and are pure: the same inputs give
bit-identical outputs. Dtype follows the inputs, so running a kernel on
float64 tensors gives the 64-bit mode used for tight gradient checks.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, NumericError, ShapeError
from .tensor import Tensor, as_tensor

# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; batch axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(a.data.swapaxes(-1, -2), g))

    return Tensor._from_op(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-axis bias vector for b."""
    if a.shape == b.shape:
        out = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return Tensor._from_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._from_op(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.data.dtype.type(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * a.data.dtype.type(s))

    return Tensor._from_op(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.data.dtype).reshape(())

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._from_op(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return Tensor._from_op(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._from_op(out, tensors, backward)


def take_row(a: Tensor, i: int) -> Tensor:
    """Row i of a 2-d tensor as a 1-d vector."""
    if a.ndim != 2:
        raise ShapeError(f"take_row needs a 2-d tensor, got {a.shape}")
    out = a.data[i].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i] = g
            a._accumulate(full)

    return Tensor._from_op(out, (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(a.data[..., start:stop])

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            a._accumulate(full)

    return Tensor._from_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# normalization and nonlinearities


def softmax_lastdim(t: Tensor) -> Tensor:
    """Stable softmax over the trailing axis (max-subtracted)."""
    if t.data.size == 0 or t.shape[-1] < 1:
        raise ShapeError(f"softmax on empty tensor of shape {t.shape}")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if t.requires_grad:
            t._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor._from_op(y, (t,), backward)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis slice to zero mean / unit variance
    (population variance), then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = t.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm params {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + t.data.dtype.type(eps))
    xhat = (t.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if t.requires_grad:
            dxhat = g * gamma.data
            t._accumulate(
                inv
                * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return Tensor._from_op(out, (t, gamma, beta), backward)


def gelu(t: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) via erf, not the tanh approximation."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(x.dtype.type(2.0))))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        if t.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(x.dtype.type(2.0 * np.pi))
            t._accumulate(g * (cdf + x * pdf))

    return Tensor._from_op(out, (t,), backward)


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * (1.0 - y * y))

    return Tensor._from_op(y, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    y = y.astype(x.dtype, copy=False)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * y * (1.0 - y))

    return Tensor._from_op(y, (t,), backward)


_ELEMENTWISE = {"gelu": gelu, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(kind: str, t: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise kind {kind!r}") from None
    return fn(t)


# ---------------------------------------------------------------------------
# fused ops (compositions of the primitives above; checked as single units)


def attention(
    x: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product self-attention over an SxD sequence."""
    s, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(t):
        return transpose(reshape(t, (s, heads, dh)), (1, 0, 2))

    q = split_heads(add(matmul(x, wq), bq))
    k = split_heads(add(matmul(x, wk), bk))
    v = split_heads(add(matmul(x, wv), bv))
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = softmax_lastdim(scores)
    ctx = reshape(transpose(matmul(attn, v), (1, 0, 2)), (s, d))
    out = add(matmul(ctx, wo), bo)
    if return_weights:
        return out, attn.detach()
    return out


def lstm_cell(
    x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, r: Tensor, b: Tensor
):
    """One LSTM step. Gate order along the 4U axis: input, forget,
    candidate, output. Returns (h_t, c_t) as 1-d vectors of width U."""
    in_dim = x.shape[-1]
    u = h_prev.shape[-1]
    if w.shape != (in_dim, 4 * u) or r.shape != (u, 4 * u) or b.shape != (4 * u,):
        raise ShapeError(
            f"lstm_cell params {w.shape}/{r.shape}/{b.shape} do not match "
            f"input {in_dim} and hidden {u}"
        )
    gates = add(
        add(matmul(reshape(x, (1, in_dim)), w), matmul(reshape(h_prev, (1, u)), r)),
        b,
    )
    i = sigmoid(slice_last(gates, 0, u))
    f = sigmoid(slice_last(gates, u, 2 * u))
    g = tanh(slice_last(gates, 2 * u, 3 * u))
    o = sigmoid(slice_last(gates, 3 * u, 4 * u))
    c_t = add(mul(f, reshape(c_prev, (1, u))), mul(i, g))
    h_t = mul(o, tanh(c_t))
    return reshape(h_t, (u,)), reshape(c_t, (u,))


# ---------------------------------------------------------------------------
# loss


def sparse_ce_loss(probabilities: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the integer true class.

    Probabilities are clamped below at 1e-12 before the log.
    """
    p = probabilities.data
    if p.ndim != 2:
        raise ShapeError(f"expected batch x classes probabilities, got {p.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = p.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} probability rows but {labels.shape} labels")
    for idx, lab in enumerate(labels):
        if not 0 <= lab < k:
            raise DataError(f"sample {idx}: label {lab} outside [0, {k})")
    picked = p[np.arange(n), labels]
    clamped = np.maximum(picked, p.dtype.type(1e-12))
    out = (-np.log(clamped)).mean(dtype=p.dtype).reshape(())

    def backward(g):
        if probabilities.requires_grad:
            full = np.zeros_like(p)
            live = picked >= 1e-12  # clamp kills the gradient below it
            full[np.arange(n), labels] = np.where(live, -1.0 / (n * clamped), 0.0)
            probabilities._accumulate(full * g)

    return Tensor._from_op(out, (probabilities,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, step: float = 1e-5, float64: bool = False) -> float:
    """Max relative error between the analytic gradient of the scalar
    function f at x and a central finite difference with the given step.

    The analytic side runs at the tensor's storage precision (float32
    unless float64=True); the finite-difference oracle always evaluates
    in float64 so its own noise does not mask kernel bugs.
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.astype(np.float64 if float64 else np.float32), requires_grad=True)
    y = f(probe)
    if not np.isfinite(y.data).all():
        raise NumericError("function value is not finite at the check point")
    y.backward()
    analytic = np.zeros_like(base) if probe.grad is None else np.asarray(
        probe.grad, dtype=np.float64
    )

    def eval64(arr):
        out = f(Tensor(arr.astype(np.float64)))
        val = float(out.data)
        if not math.isfinite(val):
            raise NumericError("function value is not finite near the check point")
        return val

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        hi = eval64(base)
        flat[idx] = orig - step
        lo = eval64(base)
        flat[idx] = orig
        num_flat[idx] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def multi_grad_check(f, params: dict, step: float = 1e-5, float64: bool = False) -> float:
    """grad_check over several named parameters: checks each in turn while
    the others stay fixed, returning the worst relative error."""
    worst = 0.0
    for name, p in params.items():

        def f_one(t, _name=name):
            originals = {n: q for n, q in params.items()}
            originals[_name] = t
            return f(originals)

        worst = max(worst, grad_check(f_one, p, step=step, float64=float64))
    return worst
