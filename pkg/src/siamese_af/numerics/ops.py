"""Op kernels. Each takes raw arrays and returns ``(output, backward_fn)``.

Shapes follow ``[batch, channels, length]`` for signals and
``[batch, features]`` for vectors.
"""

from __future__ import annotations

import numpy as np

from .core import NumericsError, ShapeError, Tensor, forward_op, register


def _require(attrs: dict, *keys):
    missing = [k for k in keys if k not in attrs]
    if missing:
        raise NumericsError(f"missing attrs {missing}")
    return [attrs[k] for k in keys]


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _layout(attrs) -> bool:
    """True for channel-major ``[channels, batch, length]`` arrays."""
    layout = attrs.get("layout", "ncl")
    if layout not in ("ncl", "cnl"):
        raise NumericsError(f"unknown layout {layout!r}")
    return layout == "cnl"


@register("conv1d")
def _conv1d(inputs, attrs, needs):
    """1-D cross-correlation. ``layout="cnl"`` keeps activations channel-major,
    which avoids the transposes around the matrix products."""
    x, w = inputs[0], inputs[1]
    b = inputs[2] if len(inputs) > 2 else None
    stride, padding = _require(attrs, "stride", "padding")
    cnl = _layout(attrs)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x [B,C,L] and w [O,C,K], got {x.shape}, {w.shape}")
    if cnl:
        C, B, L = x.shape
    else:
        B, C, L = x.shape
    O, Cw, K = w.shape
    if Cw != C:
        raise ShapeError(f"conv1d channel mismatch: x has {C}, w expects {Cw}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv1d bias shape {b.shape} != ({O},)")
    Lo = conv_output_length(L, K, stride, padding)
    if Lo < 1:
        raise ShapeError(f"conv1d output length {Lo} < 1 for L={L}, K={K}")
    span = stride * (Lo - 1) + 1
    # im2col: cols[(c, k), (b, t)] = xpad[b, c, k + stride * t]
    if padding or not cnl:
        xt = np.zeros((C, B, L + 2 * padding), dtype=x.dtype)
        xt[:, :, padding : padding + L] = x if cnl else x.transpose(1, 0, 2)
    else:
        xt = x
    cols = np.empty((C, K, B, Lo), dtype=x.dtype)
    for k in range(K):
        cols[:, k] = xt[:, :, k : k + span : stride]
    cols = cols.reshape(C * K, B * Lo)
    del xt
    w2 = w.reshape(O, C * K)
    out = w2 @ cols
    if b is not None:
        out += b[:, None]
    out = out.reshape(O, B, Lo)
    if not cnl:
        out = np.ascontiguousarray(out.transpose(1, 0, 2))

    def backward_fn(g):
        gt = g.reshape(O, B * Lo) if cnl else np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(O, B * Lo)
        dx = dw = db = None
        if needs[1]:
            dw = (gt @ cols.T).reshape(O, C, K)
        if b is not None and needs[2]:
            db = gt.sum(axis=1)
        if needs[0]:
            dcols = (w2.T @ gt).reshape(C, K, B, Lo)
            dxt = np.zeros((C, B, L + 2 * padding), dtype=g.dtype)
            for k in range(K):
                dxt[:, :, k : k + span : stride] += dcols[:, k]
            dx = dxt[:, :, padding : padding + L] if padding else dxt
            dx = np.ascontiguousarray(dx if cnl else dx.transpose(1, 0, 2))
        return (dx, dw) if b is None else (dx, dw, db)

    return out, backward_fn


@register("linear")
def _linear(inputs, attrs, needs):
    x, w = inputs[0], inputs[1]
    b = inputs[2] if len(inputs) > 2 else None
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects x [B,I] and w [O,I], got {x.shape}, {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} != ({w.shape[0]},)")
    out = x @ w.T
    if b is not None:
        out += b

    def backward_fn(g):
        dx = g @ w if needs[0] else None
        dw = g.T @ x if needs[1] else None
        if b is None:
            return dx, dw
        return dx, dw, (g.sum(axis=0) if needs[2] else None)

    return out, backward_fn


@register("batchnorm1d")
def _batchnorm1d(inputs, attrs, needs):
    """Normalize per channel over batch (and length for 3-D input).

    attrs: eps, momentum, training, and the running_mean / running_var arrays,
    which are updated in place in training mode.
    """
    x, gamma, beta = inputs
    eps, momentum, training = _require(attrs, "eps", "momentum", "training")
    cnl = x.ndim == 3 and _layout(attrs)
    ch = 0 if cnl else 1
    if x.ndim not in (2, 3) or gamma.shape != (x.shape[ch],) or beta.shape != (x.shape[ch],):
        raise ShapeError(f"batchnorm1d: bad shapes x={x.shape}, gamma={gamma.shape}, beta={beta.shape}")
    if cnl:
        axes, bshape = (1, 2), (-1, 1, 1)
    else:
        axes = (0,) if x.ndim == 2 else (0, 2)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    n = x.size // x.shape[ch]
    running_mean = attrs.get("running_mean")
    running_var = attrs.get("running_var")
    if training:
        if n < 2:
            raise ShapeError("batchnorm1d in training mode needs more than one value per channel")
        mean = _channel_sum(x, cnl) / n
        xc = x - mean.reshape(bshape)
        var = _channel_dot(xc, xc, cnl) / n
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / (n - 1))
    else:
        if running_mean is None or running_var is None:
            raise NumericsError("batchnorm1d inference mode needs running statistics")
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        xc = x - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    out = xc * (gamma * inv_std).reshape(bshape)
    out += beta.reshape(bshape)

    def backward_fn(g):
        sum_g = _channel_sum(g, cnl)
        sum_gxhat = _channel_dot(g, xc, cnl) * inv_std
        dgamma = sum_gxhat if needs[1] else None
        dbeta = sum_g if needs[2] else None
        dx = None
        if needs[0]:
            a = gamma * inv_std
            if training:
                # dx = a * (g - mean(g) - xhat * mean(g * xhat))
                dx = g * a.reshape(bshape)
                dx -= xc * (a * sum_gxhat * inv_std / n).reshape(bshape)
                dx -= (a * sum_g / n).reshape(bshape)
            else:
                dx = g * a.reshape(bshape)
        return dx, dgamma, dbeta

    return out, backward_fn


def _channel_sum(a, cnl):
    if cnl:
        return a.reshape(a.shape[0], -1).sum(axis=1)
    return a.sum(axis=0) if a.ndim == 2 else a.sum(axis=(0, 2))


def _channel_dot(a, b, cnl):
    """Per-channel sum of ``a * b``."""
    if cnl:
        a2, b2 = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
        return np.einsum("cn,cn->c", a2, b2)
    if a.ndim == 2:
        return np.einsum("bc,bc->c", a, b)
    return np.einsum("bcl,bcl->c", a, b)


@register("relu")
def _relu(inputs, attrs, needs):
    (x,) = inputs
    out = np.maximum(x, 0)

    def backward_fn(g):
        return (g * (out > 0),)

    return out, backward_fn


@register("maxpool1d")
def _maxpool1d(inputs, attrs, needs):
    (x,) = inputs
    kernel, stride, padding = _require(attrs, "kernel", "stride", "padding")
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects [B,C,L], got {x.shape}")
    _layout(attrs)  # pooling acts on the last axis in either layout
    B, C, L = x.shape
    Lo = conv_output_length(L, kernel, stride, padding)
    if Lo < 1:
        raise ShapeError(f"maxpool1d output length {Lo} < 1")
    span = stride * (Lo - 1) + 1
    if padding:
        xp = np.empty((B, C, L + 2 * padding), dtype=x.dtype)
        xp[:, :, :padding] = -np.inf
        xp[:, :, padding + L :] = -np.inf
        xp[:, :, padding : padding + L] = x
    else:
        xp = x
    out = xp[:, :, 0:span:stride].copy()
    for k in range(1, kernel):
        np.maximum(out, xp[:, :, k : k + span : stride], out=out)

    def backward_fn(g):
        # route each output gradient to the first window position holding the max
        dxp = np.zeros((B, C, L + 2 * padding), dtype=g.dtype)
        free = np.ones(out.shape, dtype=bool)
        for k in range(kernel):
            hit = xp[:, :, k : k + span : stride] == out
            hit &= free
            free &= ~hit
            dxp[:, :, k : k + span : stride] += g * hit
        return (dxp[:, :, padding : padding + L] if padding else dxp,)

    return out, backward_fn


@register("global_avgpool1d")
def _global_avgpool1d(inputs, attrs, needs):
    (x,) = inputs
    if x.ndim != 3:
        raise ShapeError(f"global_avgpool1d expects [B,C,L], got {x.shape}")
    L = x.shape[2]
    cnl = _layout(attrs)

    def backward_fn(g):
        gg = g.T if cnl else g
        return (np.broadcast_to(gg[:, :, None] / L, x.shape).copy(),)

    # channel-major input still yields a [batch, channels] vector
    out = x.mean(axis=2)
    return (np.ascontiguousarray(out.T) if cnl else out), backward_fn


@register("add")
def _add(inputs, attrs, needs):
    a, b = inputs
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g, g

    return a + b, backward_fn


@register("flatten")
def _flatten(inputs, attrs, needs):
    (x,) = inputs
    shape = x.shape

    def backward_fn(g):
        return (g.reshape(shape),)

    return x.reshape(shape[0], -1), backward_fn


@register("slice_rows")
def _slice_rows(inputs, attrs, needs):
    """Rows ``start:stop`` along the leading axis."""
    (x,) = inputs
    start, stop = _require(attrs, "start", "stop")
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows [{start}:{stop}] outside {x.shape[0]} rows")

    def backward_fn(g):
        d = np.zeros_like(x)
        d[start:stop] = g
        return (d,)

    return x[start:stop].copy(), backward_fn


@register("stop_gradient")
def _stop_gradient(inputs, attrs, needs):
    (x,) = inputs

    def backward_fn(g):
        return (np.zeros_like(x),)

    return x.copy(), backward_fn


@register("cosine_similarity")
def _cosine_similarity(inputs, attrs, needs):
    """Row-wise cosine similarity of two ``[B, D]`` (or ``[D]``) arrays."""
    a, b = inputs
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise ShapeError(f"cosine_similarity shape mismatch {a.shape} vs {b.shape}")
    squeeze = a.ndim == 1
    a2, b2 = (a[None], b[None]) if squeeze else (a, b)
    na = np.sqrt((a2 * a2).sum(axis=1))
    nb = np.sqrt((b2 * b2).sum(axis=1))
    if (na == 0).any() or (nb == 0).any():
        raise NumericsError("cosine_similarity of a zero-norm vector")
    dot = (a2 * b2).sum(axis=1)
    cos = dot / (na * nb)

    def backward_fn(g):
        g2 = g.reshape(-1, 1)
        da = db = None
        if needs[0]:
            da = g2 * (b2 / (na * nb)[:, None] - cos[:, None] * a2 / (na * na)[:, None])
            da = da[0] if squeeze else da
        if needs[1]:
            db = g2 * (a2 / (na * nb)[:, None] - cos[:, None] * b2 / (nb * nb)[:, None])
            db = db[0] if squeeze else db
        return da, db

    return (cos[0] if squeeze else cos), backward_fn


@register("softmax_cross_entropy")
def _softmax_cross_entropy(inputs, attrs, needs):
    """Mean cross-entropy over rows whose label is >= 0; rows labelled -1 are ignored.

    With no valid rows the loss is exactly 0 and the gradient is zero.
    """
    (logits,) = inputs
    (labels,) = _require(attrs, "labels")
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[1]
    if ((labels >= C) | (labels < -1)).any():
        raise NumericsError(f"labels must lie in [-1, {C - 1}]")
    valid = labels >= 0
    n = int(valid.sum())
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.nonzero(valid)[0]
    if n:
        loss = -logp[rows, labels[rows]].sum() / n
    else:
        loss = 0.0
    out = np.asarray(loss, dtype=logits.dtype)

    def backward_fn(g):
        d = np.zeros_like(logits)
        if n:
            d[rows] = np.exp(logp[rows])
            d[rows, labels[rows]] -= 1.0
            d *= g / n
        return (d,)

    return out, backward_fn


@register("scale_add")
def _scale_add(inputs, attrs, needs):
    """Weighted sum ``sum_i coeffs[i] * inputs[i]`` of equally shaped arrays."""
    (coeffs,) = _require(attrs, "coeffs")
    if len(coeffs) != len(inputs):
        raise ShapeError(f"scale_add: {len(coeffs)} coeffs for {len(inputs)} inputs")
    shape = inputs[0].shape
    if any(x.shape != shape for x in inputs):
        raise ShapeError("scale_add inputs must share a shape")
    out = np.zeros(shape, dtype=np.result_type(*inputs))
    for c, x in zip(coeffs, inputs):
        out = out + c * x
    out = out.astype(inputs[0].dtype)

    def backward_fn(g):
        return tuple((c * g).astype(x.dtype) if need else None for c, x, need in zip(coeffs, inputs, needs))

    return out, backward_fn


@register("mean")
def _mean(inputs, attrs, needs):
    (x,) = inputs
    n = x.size
    if n == 0:
        raise ShapeError("mean of an empty array")

    def backward_fn(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return np.asarray(x.mean(), dtype=x.dtype), backward_fn


# thin functional wrappers used by layers and losses


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int, padding: int,
           layout: str = "ncl") -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return forward_op("conv1d", inputs, {"stride": stride, "padding": padding, "layout": layout})


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return forward_op("linear", [x, w] if b is None else [x, w, b])


def relu(x: Tensor) -> Tensor:
    return forward_op("relu", [x])


def maxpool1d(x: Tensor, *, kernel: int, stride: int, padding: int, layout: str = "ncl") -> Tensor:
    return forward_op("maxpool1d", [x], {"kernel": kernel, "stride": stride, "padding": padding,
                                         "layout": layout})


def global_avgpool1d(x: Tensor, layout: str = "ncl") -> Tensor:
    return forward_op("global_avgpool1d", [x], {"layout": layout})


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("add", [a, b])


def flatten(x: Tensor) -> Tensor:
    return forward_op("flatten", [x])


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return forward_op("slice_rows", [x], {"start": int(start), "stop": int(stop)})


def stop_gradient(x: Tensor) -> Tensor:
    return forward_op("stop_gradient", [x])


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("cosine_similarity", [a, b])


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    return forward_op("softmax_cross_entropy", [logits], {"labels": labels})


def scale_add(inputs, coeffs) -> Tensor:
    return forward_op("scale_add", list(inputs), {"coeffs": [float(c) for c in coeffs]})


def mean(x: Tensor) -> Tensor:
    return forward_op("mean", [x])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain (untracked) row softmax."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
