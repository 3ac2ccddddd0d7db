"""Differentiable ops over :class:`Tensor`.

Shapes are strict: the only implicit broadcast is a trailing-suffix add
(bias or positional-embedding add). Everything else needs an explicit
``reshape`` / ``swapaxes``.
"""

import numpy as np

from . import _kernels
from .tensor import ContractError, NumericError, ShapeError, Tensor, make_result


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _sum_to_shape(g, shape):
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g


def window_out_len(length, k, s, p):
    """Output extent of a windowed op: floor((L + 2p - k) / s) + 1."""
    if k <= 0 or s <= 0 or p < 0:
        raise ShapeError(f"window parameters must satisfy k>0, s>0, p>=0 (got k={k}, s={s}, p={p})")
    if length + 2 * p < k:
        raise ShapeError(f"window k={k} larger than padded input length {length} + 2*{p}")
    return (length + 2 * p - k) // s + 1


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add: cannot combine {a.shape} and {b.shape} (only trailing-suffix bias add)")
    sb = b.shape

    def bw(g):
        return g, _sum_to_shape(g, sb)

    return make_result(a.data + b.data, "add", (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return make_result(a.data * c, "scale", (a,), lambda g: (g * c,))


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return make_result(x.data.mean(axis=axes), "mean", (x,), bw)


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return make_result(out, "reshape", (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1, a2):
    out = np.ascontiguousarray(np.swapaxes(x.data, a1, a2))
    return make_result(out, "swapaxes", (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, a1, a2)),))


def getitem(x, index):
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(x.data[index]), "getitem", (x,), bw)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_result(out, "concat", tuple(tensors), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """[..., m, k] @ [..., k, n] with identical leading extents."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(ad @ bd, "matmul", (a, b), bw)


def linear(x, w, b=None):
    """x[..., in] @ W[in, out] (+ b[out])."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    x2 = xd.reshape(-1, xd.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ wd.T, x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out, "linear", inputs, bw)


# ---------------------------------------------------------------------------
# nonlinearities / normalisation
# ---------------------------------------------------------------------------


def softmax(x, axis=-1):
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, "softmax", (x,), bw)


def gelu(x):
    """GELU, tanh approximation."""
    xd = x.data
    out, t = _kernels.gelu_fwd(xd)
    return make_result(out, "gelu", (x,), lambda g: (_kernels.gelu_bwd(g, xd, t),))


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalise over the last axis, then apply per-feature gain and bias."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, "layer_norm", (x, gain, bias), bw)


def cross_entropy(logits, labels, smoothing=0.0):
    """Mean label-smoothed cross entropy over rows of ``logits`` [B, K]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [B, K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs batch {n}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy: non-finite logits")
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), labels] += 1.0 - smoothing
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(target * logp).sum() / n
    p = np.exp(logp)

    def bw(g):
        return (g * (p - target) / n,)

    return make_result(np.asarray(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# windowed ops (channel-last)
# ---------------------------------------------------------------------------


def _flatten_lead(arr, keep):
    lead = arr.shape[: arr.ndim - keep]
    return arr.reshape((-1,) + arr.shape[arr.ndim - keep :]), lead


def maxpool1d(x, k, s, p):
    """Max over windows of the second-to-last (sequence) axis of x[..., L, C]."""
    if x.ndim < 2:
        raise ShapeError(f"maxpool1d: expected [..., L, C], got {x.shape}")
    length = x.shape[-2]
    out_len = window_out_len(length, k, s, p)
    x3, lead = _flatten_lead(x.data, 2)
    xp = np.pad(x3, ((0, 0), (p, p), (0, 0)), constant_values=-np.inf)
    out, idx = _kernels.maxpool1d_fwd(xp, k, s, out_len)
    padded_len = xp.shape[1]
    in_shape = x.shape

    def bw(g):
        g3 = g.reshape((-1,) + g.shape[-2:])
        dxp = _kernels.maxpool1d_bwd(g3, idx, k, s, padded_len)
        return (dxp[:, p : p + length].reshape(in_shape),)

    return make_result(out.reshape(lead + out.shape[1:]), "maxpool1d", (x,), bw)


def conv1d(x, w, b, k, s, p):
    """Convolve x[..., L, Cin] along L with W[k, Cin, Cout] (+ b[Cout]), zero padding."""
    if x.ndim < 2 or w.shape[:2] != (k, x.shape[-1]) or w.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {w.shape} for k={k}")
    length = x.shape[-2]
    out_len = window_out_len(length, k, s, p)
    x3, lead = _flatten_lead(x.data, 2)
    xp = np.pad(x3, ((0, 0), (p, p), (0, 0)))
    cols = _kernels.gather1d(xp, k, s, out_len)  # [B, out, k, Cin]
    bsz, cin, cout = x3.shape[0], w.shape[1], w.shape[2]
    cols2 = cols.reshape(bsz * out_len, k * cin)
    w2 = w.data.reshape(k * cin, cout)
    out = cols2 @ w2
    if b is not None:
        out = out + b.data
    padded_len = xp.shape[1]
    in_shape = x.shape

    def bw(g):
        g2 = g.reshape(bsz * out_len, cout)
        dcols = (g2 @ w2.T).reshape(bsz, out_len, k, cin)
        dxp = _kernels.scatter1d(dcols, s, padded_len)
        grads = [dxp[:, p : p + length].reshape(in_shape), (cols2.T @ g2).reshape(w.shape)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(lead + (out_len, cout)), "conv1d", inputs, bw)


def conv2d(x, w, b, k, s, p):
    """Convolve x[..., H, W, Cin] with W[k, k, Cin, Cout] (+ b[Cout]), zero padding."""
    if x.ndim < 3 or w.ndim != 4 or w.shape[:3] != (k, k, x.shape[-1]):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape} for k={k}")
    h, wd_ = x.shape[-3], x.shape[-2]
    ho = window_out_len(h, k, s, p)
    wo = window_out_len(wd_, k, s, p)
    x4, lead = _flatten_lead(x.data, 3)
    xp = np.pad(x4, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _kernels.gather2d(xp, k, s, ho, wo)  # [B, ho, wo, k, k, Cin]
    bsz, cin, cout = x4.shape[0], w.shape[2], w.shape[3]
    cols2 = cols.reshape(bsz * ho * wo, k * k * cin)
    w2 = w.data.reshape(k * k * cin, cout)
    out = cols2 @ w2
    if b is not None:
        out = out + b.data
    hp, wp = xp.shape[1], xp.shape[2]
    in_shape = x.shape

    def bw(g):
        g2 = g.reshape(bsz * ho * wo, cout)
        dcols = (g2 @ w2.T).reshape(bsz, ho, wo, k, k, cin)
        dxp = _kernels.scatter2d(dcols, s, hp, wp)
        grads = [dxp[:, p : p + h, p : p + wd_].reshape(in_shape), (cols2.T @ g2).reshape(w.shape)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out.reshape(lead + (ho, wo, cout)), "conv2d", inputs, bw)
