"""Differentiable layers used by the texture and AlexNet-style networks.

Each layer exposes ``forward(inputs, ctx, train, rng)`` and
``backward(grad_out, ctx)``.  ``ctx`` is a per-invocation dict owned by the
caller; whatever a layer needs for its backward pass (im2col buffers, argmax
indices, dropout masks) lives there, never on the layer, so a single set of
parameters can be evaluated concurrently in read-only mode.

``backward`` returns ``(input_grads, param_grads)`` where ``input_grads`` is a
list aligned with the forward inputs and ``param_grads`` maps the layer's own
parameter names to gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def _windows(xp, kh, kw, stride, oh, ow):
    """(n, c, oh, ow, kh, kw) strided view of padded input ``xp``."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def conv2d_forward(x, weight, bias, stride=1, pad=0, groups=1):
    """Cross-correlation via im2col.  Returns ``(y, cache)``."""
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups:
        raise ShapeError(f"conv expects {cg * groups} input channels, got {c}")
    if o % groups:
        raise ShapeError(f"out_channels {o} not divisible by groups {groups}")
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv {kh}x{kw}/{stride} pad {pad} on {h}x{w} gives empty output")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride, oh, ow)
    og = o // groups
    y = np.empty((n, o, oh, ow))
    cols = []
    for g in range(groups):
        col = win[:, g * cg : (g + 1) * cg].transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cg * kh * kw)
        wmat = weight[g * og : (g + 1) * og].reshape(og, -1)
        y[:, g * og : (g + 1) * og] = (col @ wmat.T).reshape(n, oh, ow, og).transpose(0, 3, 1, 2)
        cols.append(col)
    y += bias.reshape(1, o, 1, 1)
    cache = (x.shape, weight, stride, pad, groups, cols, (oh, ow))
    return y, cache


def conv2d_backward(cache, grad_out):
    """Gradients ``(grad_x, grad_weight, grad_bias)`` of :func:`conv2d_forward`."""
    x_shape, weight, stride, pad, groups, cols, (oh, ow) = cache
    n, c, h, w = x_shape
    o, cg, kh, kw = weight.shape
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(n, o, oh, ow)}")
    og = o // groups
    grad_w = np.empty_like(weight)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for g in range(groups):
        gy = grad_out[:, g * og : (g + 1) * og].transpose(0, 2, 3, 1).reshape(n * oh * ow, og)
        wmat = weight[g * og : (g + 1) * og].reshape(og, -1)
        grad_w[g * og : (g + 1) * og] = (gy.T @ cols[g]).reshape(og, cg, kh, kw)
        dcol = (gy @ wmat).reshape(n, oh, ow, cg, kh, kw)
        dst = dxp[:, g * cg : (g + 1) * cg]
        for i in range(kh):
            for j in range(kw):
                dst[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcol[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
    grad_x = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d_reference(x, weight, bias, stride=1, pad=0, groups=1):
    """Direct nested-loop convolution, kept as a test oracle for small inputs."""
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    og = o // groups
    y = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for r in range(oh):
                for s in range(ow):
                    acc = bias[oc]
                    for ic in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                rr, ss = r * stride + i - pad, s * stride + j - pad
                                if 0 <= rr < h and 0 <= ss < w:
                                    acc += weight[oc, ic, i, j] * x[b, g * cg + ic, rr, ss]
                    y[b, oc, r, s] = acc
    return y


# ---------------------------------------------------------------------------
# pointwise / normalisation / pooling


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    # derivative at exactly 0 is taken as 0
    return grad_out * (x > 0)


def lrn_forward(x, size=5, k=2.0, alpha=1e-4, beta=0.75):
    """Cross-channel LRN: ``a / (k + alpha/size * sum_window a^2) ** beta``."""
    c = x.shape[1]
    half = size // 2
    sq = np.pad(x * x, ((0, 0), (half, half), (0, 0), (0, 0)))
    csum = np.cumsum(sq, axis=1)
    csum = np.concatenate([np.zeros_like(csum[:, :1]), csum], axis=1)
    window = csum[:, size : size + c] - csum[:, :c]
    scale = k + (alpha / size) * window
    return x * scale ** (-beta), scale


def lrn_backward(x, scale, grad_out, size=5, alpha=1e-4, beta=0.75):
    c = x.shape[1]
    half = size // 2
    y = x * scale ** (-beta)
    # sum over every output channel whose window contains channel i; the window is symmetric
    t = np.pad(grad_out * y / scale, ((0, 0), (half, half), (0, 0), (0, 0)))
    csum = np.concatenate([np.zeros_like(t[:, :1]), np.cumsum(t, axis=1)], axis=1)
    window = csum[:, size : size + c] - csum[:, :c]
    return grad_out * scale ** (-beta) - (2.0 * alpha * beta / size) * x * window


def maxpool_forward(x, k, stride, pad=0):
    """Windowed max.  Returns ``(y, argmax)``; ties go to the lowest index."""
    n, c, h, w = x.shape
    oh, ow = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool window {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = _windows(xp, k, k, stride, oh, ow).reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def maxpool_backward(x_shape, arg, k, stride, grad_out, pad=0):
    n, c, h, w = x_shape
    oh, ow = arg.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += grad_out * hit
    return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp


def energy_forward(x, mode="average"):
    """Global energy of each feature map: spatial mean or maximum.

    Returns ``(y, argmax)`` with ``y`` of shape (n, c, 1, 1); ``argmax`` is the
    flat spatial index of the maximum in max mode and ``None`` otherwise.
    """
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    if mode == "average":
        return flat.mean(axis=2).reshape(n, c, 1, 1), None
    if mode == "max":
        arg = flat.argmax(axis=2)
        return np.take_along_axis(flat, arg[..., None], axis=2).reshape(n, c, 1, 1), arg
    raise ValueError(f"unknown energy mode {mode!r}")


def energy_backward(x_shape, grad_out, mode="average", argmax=None):
    n, c, h, w = x_shape
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(f"energy grad_out must be {(n, c, 1, 1)}, got {grad_out.shape}")
    if mode == "average":
        return np.broadcast_to(grad_out / (h * w), x_shape).copy()
    dx = np.zeros((n, c, h * w))
    np.put_along_axis(dx, argmax[..., None], grad_out.reshape(n, c, 1), axis=2)
    return dx.reshape(x_shape)


def fc_forward(x, weight, bias):
    n = x.shape[0]
    if x.shape[2:] != (1, 1) or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc expects (n, {weight.shape[1]}, 1, 1), got {x.shape}")
    y = x.reshape(n, -1) @ weight.T + bias
    return y.reshape(n, -1, 1, 1)


def fc_backward(x, weight, grad_out):
    n = x.shape[0]
    g = grad_out.reshape(n, -1)
    xf = x.reshape(n, -1)
    return (g @ weight).reshape(x.shape), g.T @ xf, g.sum(axis=0)


def softmax(logits):
    z = logits.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, grad_logits)`` with ``grad_logits`` shaped like ``logits``.
    """
    n = logits.shape[0]
    z = logits.reshape(n, -1)
    k = z.shape[1]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} samples")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), labels] - log_norm
    loss = -logp.mean()
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).reshape(logits.shape)


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    kind = "layer"
    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {}

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def allocate(self) -> None:
        self.params = {k: np.zeros(s) for k, s in self.param_shapes().items()}

    def output_shape(self, shapes):
        raise NotImplementedError

    def forward(self, inputs, ctx, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out, ctx):
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0, groups=1, allocate=True):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"channels {in_channels}->{out_channels} not divisible by groups {groups}")
        if stride < 1 or pad < 0:
            raise ValueError("stride must be >= 1 and pad >= 0")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.pad, self.groups = kernel, stride, pad, groups
        if allocate:
            self.allocate()

    def param_shapes(self):
        k = self.kernel
        return {"weight": (self.out_channels, self.in_channels // self.groups, k, k), "bias": (self.out_channels,)}

    def config(self):
        return dict(
            in_channels=self.in_channels, out_channels=self.out_channels, kernel=self.kernel,
            stride=self.stride, pad=self.pad, groups=self.groups,
        )

    def output_shape(self, shapes):
        n, c, h, w = shapes[0]
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {c}")
        oh = _out_size(h, self.kernel, self.stride, self.pad)
        ow = _out_size(w, self.kernel, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for {self.kernel}x{self.kernel}/{self.stride} conv")
        return (n, self.out_channels, oh, ow)

    def forward(self, inputs, ctx, train=False, rng=None):
        y, ctx["cache"] = conv2d_forward(
            inputs[0], self.params["weight"], self.params["bias"], self.stride, self.pad, self.groups
        )
        return y

    def backward(self, grad_out, ctx):
        gx, gw, gb = conv2d_backward(ctx["cache"], grad_out)
        return [gx], {"weight": gw, "bias": gb}


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, shapes):
        return shapes[0]

    def forward(self, inputs, ctx, train=False, rng=None):
        ctx["x"] = inputs[0]
        return relu_forward(inputs[0])

    def backward(self, grad_out, ctx):
        return [relu_backward(ctx["x"], grad_out)], {}


class LRN(Layer):
    kind = "lrn"

    def __init__(self, size=5, k=2.0, alpha=1e-4, beta=0.75):
        super().__init__()
        self.size, self.k, self.alpha, self.beta = size, k, alpha, beta

    def config(self):
        return dict(size=self.size, k=self.k, alpha=self.alpha, beta=self.beta)

    def output_shape(self, shapes):
        return shapes[0]

    def forward(self, inputs, ctx, train=False, rng=None):
        y, scale = lrn_forward(inputs[0], self.size, self.k, self.alpha, self.beta)
        ctx["x"], ctx["scale"] = inputs[0], scale
        return y

    def backward(self, grad_out, ctx):
        return [lrn_backward(ctx["x"], ctx["scale"], grad_out, self.size, self.alpha, self.beta)], {}


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, kernel=3, stride=2, pad=0):
        super().__init__()
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def config(self):
        return dict(kernel=self.kernel, stride=self.stride, pad=self.pad)

    def output_shape(self, shapes):
        n, c, h, w = shapes[0]
        oh = _out_size(h, self.kernel, self.stride, self.pad)
        ow = _out_size(w, self.kernel, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool window {self.kernel} larger than input {h}x{w}")
        return (n, c, oh, ow)

    def forward(self, inputs, ctx, train=False, rng=None):
        y, ctx["argmax"] = maxpool_forward(inputs[0], self.kernel, self.stride, self.pad)
        ctx["x_shape"] = inputs[0].shape
        return y

    def backward(self, grad_out, ctx):
        gx = maxpool_backward(ctx["x_shape"], ctx["argmax"], self.kernel, self.stride, grad_out, self.pad)
        return [gx], {}


class Energy(Layer):
    """Global energy pooling: one value per feature map, whatever its size."""

    kind = "energy"

    def __init__(self, mode="average"):
        super().__init__()
        if mode not in ("average", "max"):
            raise ValueError(f"energy mode must be 'average' or 'max', got {mode!r}")
        self.mode = mode

    def config(self):
        return dict(mode=self.mode)

    def output_shape(self, shapes):
        n, c, _, _ = shapes[0]
        return (n, c, 1, 1)

    def forward(self, inputs, ctx, train=False, rng=None):
        y, ctx["argmax"] = energy_forward(inputs[0], self.mode)
        ctx["x_shape"] = inputs[0].shape
        return y

    def backward(self, grad_out, ctx):
        return [energy_backward(ctx["x_shape"], grad_out, self.mode, ctx["argmax"])], {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shapes):
        n, c, h, w = shapes[0]
        return (n, c * h * w, 1, 1)

    def forward(self, inputs, ctx, train=False, rng=None):
        x = inputs[0]
        ctx["x_shape"] = x.shape
        return x.reshape(x.shape[0], -1, 1, 1)

    def backward(self, grad_out, ctx):
        return [grad_out.reshape(ctx["x_shape"])], {}


class Concat(Layer):
    """Channel concatenation of 1x1 inputs, first input's channels first."""

    kind = "concat"
    n_inputs = 2

    def output_shape(self, shapes):
        a, b = shapes
        if a[0] != b[0]:
            raise ShapeError(f"concat sample counts differ: {a[0]} vs {b[0]}")
        if a[2:] != (1, 1) or b[2:] != (1, 1):
            raise ShapeError("concat inputs must be flattened to 1x1")
        return (a[0], a[1] + b[1], 1, 1)

    def forward(self, inputs, ctx, train=False, rng=None):
        a, b = inputs
        self.output_shape([a.shape, b.shape])
        ctx["split"] = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad_out, ctx):
        k = ctx["split"]
        return [grad_out[:, :k], grad_out[:, k:]], {}


class FullyConnected(Layer):
    kind = "fc"

    def __init__(self, in_features, out_features, allocate=True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        if allocate:
            self.allocate()

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def config(self):
        return dict(in_features=self.in_features, out_features=self.out_features)

    def output_shape(self, shapes):
        n, c, h, w = shapes[0]
        if (c, h, w) != (self.in_features, 1, 1):
            raise ShapeError(f"expected (n, {self.in_features}, 1, 1), got {shapes[0]}")
        return (n, self.out_features, 1, 1)

    def forward(self, inputs, ctx, train=False, rng=None):
        ctx["x"] = inputs[0]
        return fc_forward(inputs[0], self.params["weight"], self.params["bias"])

    def backward(self, grad_out, ctx):
        gx, gw, gb = fc_backward(ctx["x"], self.params["weight"], grad_out)
        return [gx], {"weight": gw, "bias": gb}


class Dropout(Layer):
    """Inverted dropout; a mask already present in ``ctx`` is reused (frozen)."""

    kind = "dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def config(self):
        return dict(rate=self.rate)

    def output_shape(self, shapes):
        return shapes[0]

    def forward(self, inputs, ctx, train=False, rng=None):
        x = inputs[0]
        if not train or self.rate == 0.0:
            ctx["mask"] = None
            return x
        mask = ctx.get("mask")
        if mask is None or mask.shape != x.shape:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
            ctx["mask"] = mask
        return x * mask

    def backward(self, grad_out, ctx):
        mask = ctx.get("mask")
        return [grad_out if mask is None else grad_out * mask], {}
