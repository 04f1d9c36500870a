"""Central finite-difference checks against the reverse-mode sweep."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, forward_op, recording, register


@register("weighted_sum")
def _weighted_sum(inputs, attrs, needs):
    (x,) = inputs
    w = np.asarray(attrs["weights"], dtype=x.dtype).reshape(x.shape)

    def backward_fn(g):
        return (g * w,)

    return np.asarray((x * w).sum(), dtype=x.dtype), backward_fn


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-4,
                    wrt: Sequence[int] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps tensors to a scalar tensor; it is re-run on perturbed copies
    of ``arrays``. ``wrt`` selects which inputs are differentiated.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    with recording() as tape:
        loss = fn(*tensors)
    backward(loss, tape)

    def value(vals):
        return fn(*[Tensor(v) for v in vals]).item()

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = value(arrays)
            flat[j] = orig - eps
            down = value(arrays)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _spaced(rng, shape, gap=0.05):
    # distinct values with gaps well above eps so max/relu never switch branch
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0.1 * gap, 0.4 * gap, n)
    return vals.reshape(shape)


def default_case(op_kind: str, attrs: dict | None, rng: np.random.Generator):
    """Random inputs and attrs for ``op_kind``: small arrays, branch-safe values."""
    attrs = dict(attrs or {})
    cnl = attrs.get("layout") == "cnl"
    if op_kind == "conv1d":
        attrs.setdefault("stride", 1)
        attrs.setdefault("padding", 1)
        k = attrs.pop("kernel", 3)
        L = max(8, k + 2)
        arrays = [rng.standard_normal((2, 2, L)), rng.standard_normal((3, 2, k)), rng.standard_normal(3)]
        if cnl:
            arrays[0] = rng.standard_normal((2, 3, L))
    elif op_kind == "linear":
        arrays = [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)]
    elif op_kind == "batchnorm1d":
        attrs.setdefault("eps", 1e-5)
        attrs.setdefault("momentum", 0.1)
        attrs.setdefault("training", True)
        c = 3
        attrs.setdefault("running_mean", rng.standard_normal(c))
        attrs.setdefault("running_var", rng.uniform(0.5, 2.0, c))
        x = rng.standard_normal((c, 4, 5) if cnl else (4, c, 5))
        arrays = [x, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]
    elif op_kind == "relu":
        x = rng.standard_normal((2, 5))
        x = np.where(np.abs(x) < 0.1, 0.1 * np.sign(x + 1e-9) + x, x)
        arrays = [x]
    elif op_kind == "maxpool1d":
        attrs.setdefault("kernel", 3)
        attrs.setdefault("stride", 2)
        attrs.setdefault("padding", 1)
        arrays = [_spaced(rng, (2, 2, 8))]
    elif op_kind == "global_avgpool1d":
        arrays = [rng.standard_normal((2, 3, 5))]
    elif op_kind == "add":
        arrays = [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]
    elif op_kind == "flatten":
        arrays = [rng.standard_normal((2, 2, 3))]
    elif op_kind == "slice_rows":
        attrs.setdefault("start", 1)
        attrs.setdefault("stop", 3)
        arrays = [rng.standard_normal((4, 3))]
    elif op_kind == "cosine_similarity":
        arrays = [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]
    elif op_kind == "softmax_cross_entropy":
        labels = rng.integers(0, 3, size=4)
        labels[rng.integers(0, 4)] = -1
        attrs.setdefault("labels", labels)
        arrays = [rng.standard_normal((4, 3))]
    elif op_kind == "scale_add":
        attrs.setdefault("coeffs", list(rng.uniform(-2, 2, 3)))
        arrays = [rng.standard_normal((2, 3)) for _ in range(3)]
    elif op_kind == "mean":
        arrays = [rng.standard_normal((3, 4))]
    else:
        raise ValueError(f"no default case for op kind {op_kind!r}")
    return arrays, attrs


def finite_difference_check(op_kind: str, attrs: dict | None = None, eps: float = 1e-4,
                            seed: int = 0) -> float:
    """Max relative gradient error of a single op on random 64-bit inputs."""
    rng = np.random.default_rng(seed)
    arrays, attrs = default_case(op_kind, attrs, rng)
    probe = forward_op(op_kind, [Tensor(a) for a in arrays], _copy_attrs(attrs)).data
    weights = rng.standard_normal(probe.shape)

    def fn(*ts):
        out = forward_op(op_kind, ts, _copy_attrs(attrs))
        return forward_op("weighted_sum", [out], {"weights": weights})

    return check_gradients(fn, arrays, eps)


def _copy_attrs(attrs: dict) -> dict:
    # running statistics are mutated in place; keep each evaluation independent
    return {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in attrs.items()}
