"""Differentiable 1-D building blocks: convolution, batch norm, pooling,
the linear classifier head, and the cross-entropy loss.

Layers own their parameter tensors; forward methods trace autodiff nodes.
Convolution is cross-correlation (no kernel flip) and runs as im2col plus
one GEMM per call.
"""

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    _node,
    add,
    concat,
    mul,
    power,
    reduce_mean,
    relu,
    reshape,
    sub,
)

__all__ = [
    "Conv1d",
    "BatchNorm1d",
    "Linear",
    "conv1d",
    "batchnorm_forward",
    "linear",
    "relu",
    "max_pool1d",
    "adaptive_avg_pool",
    "adaptive_max_pool",
    "adaptive_pool",
    "pooled_features",
    "cross_entropy",
    "softmax",
    "fan_in_uniform",
]


def fan_in_uniform(rng, shape, fan_in, dtype=np.float64):
    """Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _windows(x, kernel, stride):
    """Strided view (B, C, L_out, k) over the padded length axis."""
    b, c, length = x.shape
    l_out = (length - kernel) // stride + 1
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, l_out, kernel), (s0, s1, s2 * stride, s2), writeable=False
    )


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate (B, C_in, L) with (C_out, C_in, k) kernels.

    `bias` is optional: convolutions feeding a BatchNorm layer omit it,
    since the normalization cancels any channel offset exactly.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d expects a (B, C, L) input, got {x.data.shape}")
    b, c_in, length = x.data.shape
    c_out, c_in_w, kernel = weight.data.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv1d: input has {c_in} channels but kernel expects {c_in_w}"
        )
    l_out = (length + 2 * padding - kernel) // stride + 1
    if l_out < 1:
        raise ShapeError(
            f"conv1d: output length {l_out} < 1 for input length {length}, "
            f"kernel {kernel}, stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = (
        _windows(xp, kernel, stride)
        .transpose(0, 2, 1, 3)
        .reshape(b * l_out, c_in * kernel)
        .copy()
    )
    wflat = weight.data.reshape(c_out, c_in * kernel)
    out = np.ascontiguousarray(
        (cols @ wflat.T).reshape(b, l_out, c_out).transpose(0, 2, 1)
    )
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(b * l_out, c_out)
        gw = (g2.T @ cols).reshape(c_out, c_in, kernel)
        gx = None
        if x.requires_grad:
            gwin = (g2 @ wflat).reshape(b, l_out, c_in, kernel)
            gxp = np.zeros_like(xp)
            for t in range(kernel):
                gxp[:, :, t : t + stride * l_out : stride] += gwin[
                    :, :, :, t
                ].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


class Conv1d:
    """1-D convolution layer with fan-in-scaled uniform initialization."""

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, bias=True,
                 rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel
        self.weight = Tensor(
            fan_in_uniform(rng, (c_out, c_in, kernel), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = (
            Tensor(fan_in_uniform(rng, (c_out,), fan_in, dtype), requires_grad=True)
            if bias
            else None
        )
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1d:
    """Per-channel normalization over (batch, length) with running statistics.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running estimates with `momentum`; eval mode is a fixed affine map
    built from the running estimates, so it has no batch coupling.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.scale = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.eps = eps
        self.momentum = momentum
        self.channels = channels

    def forward(self, x, mode="train", update_running=None):
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown batchnorm mode {mode!r}")
        if update_running is None:
            update_running = mode == "train"
        b, c, length = x.data.shape
        if c != self.channels:
            raise ShapeError(
                f"batchnorm: input has {c} channels, layer has {self.channels}"
            )
        if mode == "train":
            if b < 2:
                raise ValueError("train-mode batchnorm requires batch size >= 2")
            mu = reduce_mean(x, axis=(0, 2), keepdims=True)
            centered = sub(x, mu)
            var = reduce_mean(mul(centered, centered), axis=(0, 2), keepdims=True)
            inv = power(add(var, self.eps), -0.5)
            xhat = mul(centered, inv)
            if update_running:
                n = b * length
                batch_mean = mu.data.reshape(c)
                batch_var = var.data.reshape(c)
                unbiased = batch_var * (n / (n - 1.0))
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
                self.running_var = (1.0 - m) * self.running_var + m * unbiased
        else:
            rm = self.running_mean[None, :, None]
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = mul(sub(x, Tensor(rm)), Tensor(inv[None, :, None]))
        scale = reshape(self.scale, (1, c, 1))
        shift = reshape(self.shift, (1, c, 1))
        return add(mul(xhat, scale), shift)


def batchnorm_forward(x, layer, mode="train", update_running=None):
    return layer.forward(x, mode, update_running)


def linear(x, weight, bias):
    """Affine map of (B, n_in) rows by a (n_out, n_in) weight matrix."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear expects a (B, n_in) input, got {x.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input width {x.data.shape[1]} != weight width "
            f"{weight.data.shape[1]}"
        )
    out = x.data @ weight.data.T + bias.data[None, :]

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _node(out, (x, weight, bias), backward)


class Linear:
    def __init__(self, n_in, n_out, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(
            fan_in_uniform(rng, (n_out, n_in), n_in, dtype), requires_grad=True
        )
        self.bias = Tensor(fan_in_uniform(rng, (n_out,), n_in, dtype),
                           requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


def max_pool1d(x, kernel, stride, padding=0):
    """Windowed maximum along the length axis; pads with -inf."""
    b, c, length = x.data.shape
    l_out = (length + 2 * padding - kernel) // stride + 1
    if l_out < 1:
        raise ShapeError(f"max_pool1d: output length {l_out} < 1")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = _windows(xp, kernel, stride)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        for t in range(kernel):
            gxp[:, :, t : t + stride * l_out : stride] += g * (arg == t)
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        return (gx,)

    return _node(out, (x,), backward)


def adaptive_avg_pool(x):
    """Mean over the length axis, (B, C, L) -> (B, C)."""
    return reduce_mean(x, axis=2)


def adaptive_max_pool(x):
    """Max over the length axis, (B, C, L) -> (B, C); ties take the lowest index."""
    idx = x.data.argmax(axis=2)
    out = np.take_along_axis(x.data, idx[..., None], axis=2)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], np.asarray(g)[..., None], axis=2)
        return (gx,)

    return _node(out, (x,), backward)


def adaptive_pool(x, kind, out_len=1):
    if out_len != 1:
        raise ValueError("only adaptive pooling to a single position is supported")
    if kind == "avg":
        return adaptive_avg_pool(x)
    if kind == "max":
        return adaptive_max_pool(x)
    raise ValueError(f"unknown pooling kind {kind!r}")


def pooled_features(x):
    """Concatenate average- and max-pooled channel features, (B, 2C)."""
    return concat([adaptive_avg_pool(x), adaptive_max_pool(x)], axis=1)


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-softmax probability of the true class.

    Softmax is applied exactly once, inside this op, via a max-subtracted
    log-sum-exp.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, n_classes) logits, "
                         f"got {logits.data.shape}")
    labels = np.asarray(labels)
    b, n_classes = logits.data.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {b} rows but labels shape {labels.shape}")
    if labels.dtype.kind not in "iu":
        raise TypeError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}"
        )
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (np.asarray(g) * p / b,)

    return _node(np.asarray(loss), (logits,), backward)


def softmax(logits):
    """Row-wise softmax of (B, n_classes) logits."""
    s = np.exp(_log_softmax(logits.data))

    def backward(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return _node(s, (logits,), backward)
