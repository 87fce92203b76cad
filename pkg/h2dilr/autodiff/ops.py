"""Differentiable primitives.

The set is closed: exactly what the ConvNet tokenizer, the transformer neural
decoder and the two loss stacks need. Layouts follow the usual conventions:
1-D convolutions take ``(N, C, T)``, attention takes ``(N, L, E)``.
"""

import math
from collections.abc import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from h2dilr.autodiff.tensor import Graph, Tensor, as_tensor, record
from h2dilr.core.errors import ShapeError

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(primitive: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{primitive}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise


def add(a, b) -> Tensor:
    """Elementwise sum with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return record(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    a_data, b_data = a.data, b.data
    return record(
        "mul",
        (a, b),
        a_data * b_data,
        lambda g: (_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
    deriv = cdf + x.data * pdf
    return record("gelu", (x,), x.data * cdf, lambda g: (g * deriv,))


def zero_mask(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero every entry where ``keep`` is False; ``keep`` broadcasts from the left."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape[: keep.ndim]:
        raise ShapeError(f"zero_mask: mask shape {keep.shape} does not prefix input shape {x.shape}")
    factor = keep.reshape(keep.shape + (1,) * (x.ndim - keep.ndim)).astype(np.float64)
    return record("zero_mask", (x,), x.data * factor, lambda g: (g * factor,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training."""
    if not training or rate == 0.0:
        return x
    factor = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record("dropout", (x,), x.data * factor, lambda g: (g * factor,))


# reductions and losses


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (x,), x.data.sum(axis=axis, keepdims=keepdims), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", (x,), x.data.mean(axis=axis, keepdims=keepdims), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return record("mse", (a, b), np.asarray(np.mean(diff**2)), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``(N, C)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    n = labels.size

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (g * grad / n,)

    return record("cross_entropy", (logits,), np.asarray(-log_probs[rows, labels].mean()), backward)


# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {original} to {tuple(shape)}") from None
    return record("reshape", (x,), out, lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join along ``axis``; each input receives its slice of the gradient."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing (slices, rows)."""
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, key, g)
        return (grad,)

    return record("index", (x,), np.array(x.data[key]), backward)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; output shape ``indices.shape + (D,)``."""
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index outside [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, shape[1]))
        return (grad,)

    return record("take_rows", (table,), table.data[indices], backward)


# gradient routing


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the result is a constant, so no gradient crosses this edge."""
    return Tensor(x.data.copy())


def ste(z: Tensor, z_hat: Tensor) -> Tensor:
    """Straight-through estimator ``z + sg[z_hat - z]``.

    Forward returns ``z_hat`` bit-exactly; backward is the identity into ``z``
    and nothing into ``z_hat``.
    """
    if z.shape != z_hat.shape:
        raise ShapeError(f"ste: shapes differ {z.shape} vs {z_hat.shape}")
    return record("ste", (z, z_hat), z_hat.data.copy(), lambda g: (g, None))


# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is ``(out, in)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} vs weight {weight.shape}")
    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        flat_g = g.reshape(-1, g.shape[-1])
        grads = [g @ w_data, flat_g.T @ x_data.reshape(-1, x_data.shape[-1])]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", inputs, out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shape {gamma.shape} vs features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        g_hat = g * gamma.data
        gx = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gamma, beta), x_hat * gamma.data + beta.data, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = np.exp(shifted)
    y /= y.sum(axis=axis, keepdims=True)
    return record("softmax", (x,), y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def conv_output_length(length: int, kernel: int, stride: int, padding: tuple[int, int]) -> int:
    return (length + padding[0] + padding[1] - kernel) // stride + 1


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """Cross-correlation of ``(N, Cin, T)`` with ``(Cout, Cin, k)`` weights."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, length = x.shape
    c_out, w_in, kernel = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv1d: input channels {c_in} != weight in-channels {w_in}")
    pad_left, pad_right = padding
    l_out = conv_output_length(length, kernel, stride, padding)
    if l_out < 1:
        raise ShapeError(f"conv1d: input length {length} too short for kernel {kernel}, padding {padding}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right)))
    windows = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride, :][:, :, :l_out, :]
    w_data = weight.data
    out = np.einsum("nclk,ock->nol", windows, w_data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        grad_windows = np.einsum("nol,ock->nclk", g, w_data, optimize=True)
        grad_padded = np.zeros_like(padded)
        span = stride * (l_out - 1) + 1
        for j in range(kernel):
            grad_padded[:, :, j : j + span : stride] += grad_windows[..., j]
        grads = [
            grad_padded[:, :, pad_left : pad_left + length],
            np.einsum("nclk,nol->ock", windows, g, optimize=True),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv1d", inputs, out, backward)


def conv_transpose1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad_left: int = 0,
    output_length: int | None = None,
) -> Tensor:
    """Transposed convolution of ``(N, Cin, L)`` with ``(Cin, Cout, k)`` weights.

    The full output has length ``(L - 1) * stride + k``; ``pad_left`` entries are
    cropped from the left and the result is cropped or zero-extended on the right
    to ``output_length`` (output-padding control).
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(
            f"conv_transpose1d: expected 3-D input and weight, got {x.shape} and {weight.shape}"
        )
    n, c_in, length = x.shape
    w_in, c_out, kernel = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv_transpose1d: input channels {c_in} != weight in-channels {w_in}")
    full = (length - 1) * stride + kernel
    if output_length is None:
        output_length = full - pad_left
    if output_length < 1 or pad_left >= full:
        raise ShapeError(
            f"conv_transpose1d: output length {output_length} impossible from input length {length}"
        )
    x_data, w_data = x.data, weight.data
    contrib = np.einsum("nci,coj->noij", x_data, w_data, optimize=True)
    span = stride * (length - 1) + 1
    out_full = np.zeros((n, c_out, max(full, pad_left + output_length)))
    for j in range(kernel):
        out_full[:, :, j : j + span : stride] += contrib[..., j]
    out = out_full[:, :, pad_left : pad_left + output_length]
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        grad_full = np.zeros_like(out_full)
        grad_full[:, :, pad_left : pad_left + output_length] = g
        grad_contrib = np.stack(
            [grad_full[:, :, j : j + span : stride] for j in range(kernel)], axis=-1
        )
        grads = [
            np.einsum("noij,coj->nci", grad_contrib, w_data, optimize=True),
            np.einsum("noij,nci->coj", grad_contrib, x_data, optimize=True),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv_transpose1d", inputs, np.ascontiguousarray(out), backward)


def avg_pool1d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling (stride == kernel), trailing remainder dropped."""
    if x.ndim != 3:
        raise ShapeError(f"avg_pool1d: expected (N, C, T), got {x.shape}")
    length = x.shape[2]
    l_out = length // kernel
    if l_out < 1:
        raise ShapeError(f"avg_pool1d: length {length} shorter than kernel {kernel}")
    used = l_out * kernel
    out = x.data[:, :, :used].reshape(x.shape[0], x.shape[1], l_out, kernel).mean(axis=-1)

    def backward(g):
        grad = np.zeros(x.shape)
        grad[:, :, :used] = np.repeat(g / kernel, kernel, axis=2)
        return (grad,)

    return record("avg_pool1d", (x,), out, backward)


def attention_probs(q: np.ndarray, k: np.ndarray, heads: int, bias: np.ndarray | None = None) -> np.ndarray:
    """Softmax attention weights ``(N, H, L, L)`` for ``(N, L, E)`` queries and keys."""
    n, length, embed = q.shape
    head_dim = embed // heads
    q_h = q.reshape(n, length, heads, head_dim).transpose(0, 2, 1, 3)
    k_h = k.reshape(n, length, heads, head_dim).transpose(0, 2, 1, 3)
    scores = q_h @ k_h.transpose(0, 1, 3, 2) / math.sqrt(head_dim)
    if bias is not None:
        scores = scores + bias[None]
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    return probs / probs.sum(axis=-1, keepdims=True)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product multi-head attention with an optional ``(H, L, L)`` logit bias."""
    if not q.shape == k.shape == v.shape or q.ndim != 3:
        raise ShapeError(f"attention: q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    n, length, embed = q.shape
    if embed % heads:
        raise ShapeError(f"attention: embed dim {embed} not divisible by {heads} heads")
    if bias is not None and bias.shape != (heads, length, length):
        raise ShapeError(f"attention: bias shape {bias.shape} != {(heads, length, length)}")
    head_dim = embed // heads
    scale_factor = 1.0 / math.sqrt(head_dim)

    def split(a):
        return a.reshape(n, length, heads, head_dim).transpose(0, 2, 1, 3)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(n, length, embed)

    q_h, k_h, v_h = split(q.data), split(k.data), split(v.data)
    probs = attention_probs(q.data, k.data, heads, None if bias is None else bias.data)
    out = merge(probs @ v_h)

    def backward(g):
        g_h = split(g)
        grad_v = probs.transpose(0, 1, 3, 2) @ g_h
        grad_p = g_h @ v_h.transpose(0, 1, 3, 2)
        grad_s = probs * (grad_p - (grad_p * probs).sum(axis=-1, keepdims=True))
        grads = [
            merge(grad_s @ k_h * scale_factor),
            merge(grad_s.transpose(0, 1, 3, 2) @ q_h * scale_factor),
            merge(grad_v),
        ]
        if bias is not None:
            grads.append(grad_s.sum(axis=0))
        return grads

    inputs = (q, k, v) if bias is None else (q, k, v, bias)
    return record("attention", inputs, out, backward)


def relative_position_bias(table: Tensor, buckets: np.ndarray) -> Tensor:
    """Expand a ``(H, n_buckets)`` table into an ``(H, L, L)`` attention-logit bias."""
    buckets = np.asarray(buckets, dtype=np.int64)
    if table.ndim != 2 or buckets.ndim != 2 or buckets.max(initial=0) >= table.shape[1]:
        raise ShapeError(f"relative_position_bias: table {table.shape} vs buckets {buckets.shape}")
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, (slice(None), buckets), g)
        return (grad,)

    return record("relative_position_bias", (table,), table.data[:, buckets], backward)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "zero_mask": zero_mask,
    "dropout": dropout,
    "sum": sum,
    "mean": mean,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "index": index,
    "take_rows": take_rows,
    "ste": ste,
    "linear": linear,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "conv1d": conv1d,
    "conv_transpose1d": conv_transpose1d,
    "avg_pool1d": avg_pool1d,
    "attention": attention,
    "relative_position_bias": relative_position_bias,
}


def forward(graph: Graph, primitive: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a named primitive inside ``graph``."""
    try:
        fn = PRIMITIVES[primitive]
    except KeyError:
        raise ShapeError(f"unknown primitive '{primitive}'") from None
    with graph:
        return fn(*inputs, **attrs)
