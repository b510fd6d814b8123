"""Differentiable layer kernels with explicit forward and backward passes.

Conventions shared by every layer:

- Image tensors are 4-D ``(batch, channel, height, width)``, row-major.
- Convolutions are stride-1 cross-correlations with "same" zero padding,
  so spatial extents are preserved. Even kernels pad asymmetrically
  (``(k-1)//2`` before, the remainder after).
- ``forward(x, mode, rng)`` returns ``(y, cache)`` and also remembers the
  cache, so single-branch code may call ``backward(grad)`` without it.
  Twin-branch code passes each branch's cache explicitly.
- ``backward`` accumulates parameter gradients in place (``grads[k] += ...``)
  and returns the gradient with respect to the layer input.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import config
from .errors import ConfigError, SevenError, ShapeMismatchError

TRAIN = "train"
EVAL = "eval"

LAYER_KINDS = (
    "Conv", "TransConv", "MaxPool", "Upsample", "Dense",
    "ReLU", "Sigmoid", "Tanh", "BatchNorm", "Dropout", "Reshape", "Flatten",
)


class LayerSpec:
    """Declarative description of one layer, enough to rebuild it from a checkpoint."""

    def __init__(self, kind, kernel=None, out_channels=None, out_units=None,
                 rate=None, factor=None, target=None):
        self.kind = kind
        self.kernel = tuple(kernel) if kernel is not None else None
        self.out_channels = out_channels
        self.out_units = out_units
        self.rate = rate
        self.factor = tuple(factor) if factor is not None else None
        self.target = tuple(target) if target is not None else None
        self.validate()

    def validate(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}, expected one of {LAYER_KINDS}")
        if self.kernel is not None and any(k < 1 for k in self.kernel):
            raise ConfigError(f"{self.kind}: kernel extents must be >= 1, got {self.kernel}")
        if self.rate is not None and not (0.0 <= self.rate < 1.0):
            raise ConfigError(f"{self.kind}: dropout rate must be in [0, 1), got {self.rate}")
        if self.factor is not None and any(f < 1 for f in self.factor):
            raise ConfigError(f"{self.kind}: factors must be >= 1, got {self.factor}")
        if self.kind in ("Conv", "TransConv") and (self.kernel is None or self.out_channels is None):
            raise ConfigError(f"{self.kind} needs kernel and out_channels")
        if self.kind == "Dense" and self.out_units is None:
            raise ConfigError("Dense needs out_units")
        if self.kind in ("MaxPool", "Upsample") and self.factor is None:
            raise ConfigError(f"{self.kind} needs a factor")
        if self.kind == "Dropout" and self.rate is None:
            raise ConfigError("Dropout needs a rate")
        if self.kind == "Reshape" and self.target is None:
            raise ConfigError("Reshape needs a target (c, h, w)")

    def to_dict(self):
        d = {"kind": self.kind}
        for key in ("kernel", "out_channels", "out_units", "rate", "factor", "target"):
            value = getattr(self, key)
            if value is not None:
                d[key] = list(value) if isinstance(value, tuple) else value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", None)
        if kind is None:
            raise ConfigError("layer spec missing 'kind'")
        known = {"kernel", "out_channels", "out_units", "rate", "factor", "target"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"layer spec has unknown keys: {sorted(unknown)}")
        return cls(kind, **d)

    def __repr__(self):
        return f"LayerSpec({self.to_dict()})"


def _same_pads(k):
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(xp, kh, kw):
    """Window the padded input into a (B*H*W, C*kh*kw) matrix; H, W are output extents."""
    b, c, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, H, W, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kh * kw), h, w


def _col2im(cols, b, c, h, w, kh, kw, pads):
    """Adjoint of _im2col: scatter-add windows back and crop the padding border."""
    (ph0, ph1), (pw0, pw1) = pads
    hp, wp = h + ph0 + ph1, w + pw0 + pw1
    cols6 = cols.reshape(b, h, w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols6[:, :, :, :, i, j]
    return xp[:, :, ph0:ph0 + h, pw0:pw0 + w]


def _pad_same(x, kh, kw):
    (ph0, ph1), (pw0, pw1) = _same_pads(kh), _same_pads(kw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    return xp, (_same_pads(kh), _same_pads(kw))


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "?"
    has_params = False

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.last_cache = None

    def init_params(self, rng):
        pass

    def _alloc_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, mode=EVAL, rng=None):
        y, cache = self._forward(np.asarray(x, dtype=self.dtype), mode, rng)
        self.last_cache = cache
        return y, cache

    def backward(self, grad_out, cache=None):
        if cache is None:
            cache = self.last_cache
        if cache is None:
            raise SevenError(f"{self.kind}: backward called before forward")
        return self._backward(np.asarray(grad_out, dtype=self.dtype), cache)

    def _forward(self, x, mode, rng):
        raise NotImplementedError

    def _backward(self, grad_out, cache):
        raise NotImplementedError


class Conv(Layer):
    kind = "Conv"
    has_params = True

    def __init__(self, in_channels, out_channels, kernel, dtype=np.float64):
        super().__init__(dtype)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = kernel

    def init_params(self, rng):
        fan_in = self.in_channels * self.kh * self.kw
        fan_out = self.out_channels * self.kh * self.kw
        self.params["W"] = glorot_uniform(
            rng, (self.out_channels, self.in_channels, self.kh, self.kw), fan_in, fan_out, self.dtype)
        self.params["b"] = np.zeros(self.out_channels, dtype=self.dtype)
        self._alloc_grads()

    def _forward(self, x, mode, rng):
        if x.ndim != 4:
            raise ShapeMismatchError(f"Conv expects 4-D input, got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"Conv expects {self.in_channels} input channels, got input shape {x.shape}")
        b, _, h, w = x.shape
        xp, pads = _pad_same(x, self.kh, self.kw)
        cols, oh, ow = _im2col(xp, self.kh, self.kw)
        wmat = self.params["W"].reshape(self.out_channels, -1)
        y = (cols @ wmat.T).reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        y += self.params["b"][None, :, None, None]
        return y, (cols, (b, h, w), pads)

    def _backward(self, grad_out, cache):
        cols, (b, h, w), pads = cache
        gmat = grad_out.transpose(0, 2, 3, 1).reshape(b * h * w, self.out_channels)
        wmat = self.params["W"].reshape(self.out_channels, -1)
        self.grads["W"] += (gmat.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] += grad_out.sum(axis=(0, 2, 3))
        dcols = gmat @ wmat
        return _col2im(dcols, b, self.in_channels, h, w, self.kh, self.kw, pads)


class TransConv(Layer):
    """Exact linear adjoint of Conv under the same padding convention.

    The weight is stored conv-oriented as (in_channels, out_channels, kh, kw):
    this layer applies the transpose of the convolution that maps
    out_channels -> in_channels.
    """

    kind = "TransConv"
    has_params = True

    def __init__(self, in_channels, out_channels, kernel, dtype=np.float64):
        super().__init__(dtype)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = kernel

    def init_params(self, rng):
        fan_in = self.in_channels * self.kh * self.kw
        fan_out = self.out_channels * self.kh * self.kw
        self.params["W"] = glorot_uniform(
            rng, (self.in_channels, self.out_channels, self.kh, self.kw), fan_in, fan_out, self.dtype)
        self.params["b"] = np.zeros(self.out_channels, dtype=self.dtype)
        self._alloc_grads()

    def _forward(self, x, mode, rng):
        if x.ndim != 4:
            raise ShapeMismatchError(f"TransConv expects 4-D input, got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"TransConv expects {self.in_channels} input channels, got input shape {x.shape}")
        b, _, h, w = x.shape
        xmat = x.transpose(0, 2, 3, 1).reshape(b * h * w, self.in_channels)
        wmat = self.params["W"].reshape(self.in_channels, -1)
        pads = (_same_pads(self.kh), _same_pads(self.kw))
        y = _col2im(xmat @ wmat, b, self.out_channels, h, w, self.kh, self.kw, pads)
        y += self.params["b"][None, :, None, None]
        return y, (xmat, (b, h, w))

    def _backward(self, grad_out, cache):
        xmat, (b, h, w) = cache
        gp, _ = _pad_same(grad_out, self.kh, self.kw)
        gcols, _, _ = _im2col(gp, self.kh, self.kw)
        wmat = self.params["W"].reshape(self.in_channels, -1)
        self.grads["W"] += (xmat.T @ gcols).reshape(self.params["W"].shape)
        self.grads["b"] += grad_out.sum(axis=(0, 2, 3))
        dx = (gcols @ wmat.T).reshape(b, h, w, self.in_channels).transpose(0, 3, 1, 2)
        return dx


class MaxPool(Layer):
    kind = "MaxPool"

    def __init__(self, factor, dtype=np.float64):
        super().__init__(dtype)
        self.fh, self.fw = factor

    def _forward(self, x, mode, rng):
        if x.ndim != 4:
            raise ShapeMismatchError(f"MaxPool expects 4-D input, got shape {x.shape}")
        b, c, h, w = x.shape
        oh, ow = h // self.fh, w // self.fw
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"MaxPool {self.fh}x{self.fw} cannot pool input shape {x.shape}")
        hc, wc = oh * self.fh, ow * self.fw
        # Trailing remainder rows/cols are discarded (floor division).
        windows = (x[:, :, :hc, :wc]
                   .reshape(b, c, oh, self.fh, ow, self.fw)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(b, c, oh, ow, self.fh * self.fw))
        idx = windows.argmax(axis=4)  # ties resolve to the first element in scan order
        y = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]
        return y, (idx, x.shape)

    def _backward(self, grad_out, cache):
        idx, in_shape = cache
        b, c, h, w = in_shape
        oh, ow = h // self.fh, w // self.fw
        hc, wc = oh * self.fh, ow * self.fw
        dwin = np.zeros((b, c, oh, ow, self.fh * self.fw), dtype=grad_out.dtype)
        np.put_along_axis(dwin, idx[..., None], grad_out[..., None], axis=4)
        dx = np.zeros(in_shape, dtype=grad_out.dtype)
        dx[:, :, :hc, :wc] = (dwin.reshape(b, c, oh, ow, self.fh, self.fw)
                              .transpose(0, 1, 2, 4, 3, 5)
                              .reshape(b, c, hc, wc))
        return dx


class Upsample(Layer):
    """Nearest-neighbor replication; optional target extent restores shapes the
    paired pooling layer truncated (edge rows/cols are replicated)."""

    kind = "Upsample"

    def __init__(self, factor, target=None, dtype=np.float64):
        super().__init__(dtype)
        self.fh, self.fw = factor
        self.target = target

    def _forward(self, x, mode, rng):
        if x.ndim != 4:
            raise ShapeMismatchError(f"Upsample expects 4-D input, got shape {x.shape}")
        y = x.repeat(self.fh, axis=2).repeat(self.fw, axis=3)
        hf, wf = y.shape[2], y.shape[3]
        if self.target is not None:
            th, tw = self.target
            if not (hf <= th < hf + self.fh and wf <= tw < wf + self.fw):
                raise ShapeMismatchError(
                    f"Upsample target {self.target} unreachable from replicated shape {(hf, wf)}")
            y = np.pad(y, ((0, 0), (0, 0), (0, th - hf), (0, tw - wf)), mode="edge")
        return y, (x.shape, hf, wf)

    def _backward(self, grad_out, cache):
        in_shape, hf, wf = cache
        b, c, h, w = in_shape
        g = grad_out
        if g.shape[2] > hf:
            g = g[:, :, :hf, :].copy()
            g[:, :, hf - 1, :] += grad_out[:, :, hf:, :].sum(axis=2)
        if g.shape[3] > wf:
            extra = g[:, :, :, wf:].sum(axis=3)
            g = g[:, :, :, :wf].copy()
            g[:, :, :, wf - 1] += extra
        return g.reshape(b, c, h, self.fh, w, self.fw).sum(axis=(3, 5))


class Dense(Layer):
    kind = "Dense"
    has_params = True

    def __init__(self, in_units, out_units, dtype=np.float64):
        super().__init__(dtype)
        self.in_units = in_units
        self.out_units = out_units

    def init_params(self, rng):
        self.params["W"] = glorot_uniform(
            rng, (self.in_units, self.out_units), self.in_units, self.out_units, self.dtype)
        self.params["b"] = np.zeros(self.out_units, dtype=self.dtype)
        self._alloc_grads()

    def _forward(self, x, mode, rng):
        if x.ndim != 2 or x.shape[1] != self.in_units:
            raise ShapeMismatchError(
                f"Dense expects input shape (batch, {self.in_units}), got {x.shape}")
        return x @ self.params["W"] + self.params["b"], x

    def _backward(self, grad_out, cache):
        x = cache
        self.grads["W"] += x.T @ grad_out
        self.grads["b"] += grad_out.sum(axis=0)
        return grad_out @ self.params["W"].T


class ReLU(Layer):
    kind = "ReLU"

    def _forward(self, x, mode, rng):
        return np.maximum(x, 0), x

    def _backward(self, grad_out, cache):
        return grad_out * (cache > 0)


class Sigmoid(Layer):
    kind = "Sigmoid"

    def _forward(self, x, mode, rng):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def _backward(self, grad_out, cache):
        return grad_out * cache * (1.0 - cache)


class Tanh(Layer):
    kind = "Tanh"

    def _forward(self, x, mode, rng):
        y = np.tanh(x)
        return y, y

    def _backward(self, grad_out, cache):
        return grad_out * (1.0 - cache * cache)


class BatchNorm(Layer):
    """Per-channel normalization over the batch (and spatial axes for 4-D input).

    Train mode normalizes by batch statistics and smooths the running
    estimates; eval mode normalizes by the running estimates.
    """

    kind = "BatchNorm"
    has_params = True

    def __init__(self, channels, momentum=config.BN_MOMENTUM, eps=config.BN_EPS, dtype=np.float64):
        super().__init__(dtype)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps

    def init_params(self, rng):
        self.params["gain"] = np.ones(self.channels, dtype=self.dtype)
        self.params["shift"] = np.zeros(self.channels, dtype=self.dtype)
        self.buffers["running_mean"] = np.zeros(self.channels, dtype=self.dtype)
        self.buffers["running_var"] = np.ones(self.channels, dtype=self.dtype)
        self._alloc_grads()

    def _axes_and_view(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, self.channels, 1, 1)
        if x.ndim == 2:
            return (0,), (1, self.channels)
        raise ShapeMismatchError(f"BatchNorm expects 2-D or 4-D input, got shape {x.shape}")

    def _forward(self, x, mode, rng):
        axes, view = self._axes_and_view(x)
        if x.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"BatchNorm expects {self.channels} channels, got input shape {x.shape}")
        gain = self.params["gain"].reshape(view)
        shift = self.params["shift"].reshape(view)
        if mode == TRAIN:
            if x.shape[0] < 2:
                raise ShapeMismatchError(
                    f"BatchNorm in train mode needs batch >= 2, got batch {x.shape[0]}")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var.reshape(view) + self.eps)
            xhat = (x - mean.reshape(view)) * inv_std
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
            return gain * xhat + shift, (xhat, inv_std, axes, view, TRAIN)
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"].reshape(view) + self.eps)
        xhat = (x - self.buffers["running_mean"].reshape(view)) * inv_std
        return gain * xhat + shift, (xhat, inv_std, axes, view, EVAL)

    def _backward(self, grad_out, cache):
        xhat, inv_std, axes, view, mode = cache
        gain = self.params["gain"].reshape(view)
        self.grads["gain"] += (grad_out * xhat).sum(axis=axes)
        self.grads["shift"] += grad_out.sum(axis=axes)
        if mode == EVAL:
            return grad_out * gain * inv_std
        n = 1
        for ax in axes:
            n *= xhat.shape[ax]
        g = grad_out * gain
        mean_g = g.mean(axis=axes).reshape(view)
        mean_gx = (g * xhat).mean(axis=axes).reshape(view)
        return inv_std * (g - mean_g - xhat * mean_gx)


class Dropout(Layer):
    """Inverted dropout: train mode zeroes units and rescales survivors by
    1/(1-rate); eval mode is the identity."""

    kind = "Dropout"

    def __init__(self, rate, dtype=np.float64):
        super().__init__(dtype)
        if not (0.0 <= rate < 1.0):
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def _forward(self, x, mode, rng):
        if mode != TRAIN or self.rate == 0.0:
            return x, 1.0  # identity scale; keeps the cache non-None for backward
        if rng is None:
            raise ConfigError("Dropout in train mode requires an rng")
        keep = rng.random(x.shape, dtype=x.dtype) >= self.rate
        scale = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * scale, scale

    def _backward(self, grad_out, cache):
        return grad_out * cache


class Flatten(Layer):
    kind = "Flatten"

    def _forward(self, x, mode, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def _backward(self, grad_out, cache):
        return grad_out.reshape(cache)


class Reshape(Layer):
    kind = "Reshape"

    def __init__(self, target, dtype=np.float64):
        super().__init__(dtype)
        self.target = tuple(target)

    def _forward(self, x, mode, rng):
        want = int(np.prod(self.target))
        have = int(np.prod(x.shape[1:]))
        if want != have:
            raise ShapeMismatchError(
                f"Reshape to {self.target} needs {want} values per sample, input shape {x.shape} has {have}")
        return x.reshape((x.shape[0],) + self.target), x.shape

    def _backward(self, grad_out, cache):
        return grad_out.reshape(cache)


def build_layer(spec: LayerSpec, in_shape, dtype):
    """Materialize one spec given the incoming per-sample shape; returns (layer, out_shape).

    ``in_shape`` is (c, h, w) for image tensors or (k,) for flat ones.
    """
    kind = spec.kind
    if kind == "Conv":
        c, h, w = _expect_image(kind, in_shape)
        return Conv(c, spec.out_channels, spec.kernel, dtype), (spec.out_channels, h, w)
    if kind == "TransConv":
        c, h, w = _expect_image(kind, in_shape)
        return TransConv(c, spec.out_channels, spec.kernel, dtype), (spec.out_channels, h, w)
    if kind == "MaxPool":
        c, h, w = _expect_image(kind, in_shape)
        fh, fw = spec.factor
        return MaxPool(spec.factor, dtype), (c, h // fh, w // fw)
    if kind == "Upsample":
        c, h, w = _expect_image(kind, in_shape)
        if spec.target is not None:
            th, tw = spec.target
        else:
            th, tw = h * spec.factor[0], w * spec.factor[1]
        return Upsample(spec.factor, spec.target, dtype), (c, th, tw)
    if kind == "Dense":
        if len(in_shape) != 1:
            raise ConfigError(f"Dense needs a flat input, got per-sample shape {in_shape}")
        return Dense(in_shape[0], spec.out_units, dtype), (spec.out_units,)
    if kind == "ReLU":
        return ReLU(dtype), in_shape
    if kind == "Sigmoid":
        return Sigmoid(dtype), in_shape
    if kind == "Tanh":
        return Tanh(dtype), in_shape
    if kind == "BatchNorm":
        return BatchNorm(in_shape[0], dtype=dtype), in_shape
    if kind == "Dropout":
        return Dropout(spec.rate, dtype), in_shape
    if kind == "Flatten":
        return Flatten(dtype), (int(np.prod(in_shape)),)
    if kind == "Reshape":
        return Reshape(spec.target, dtype), spec.target
    raise ConfigError(f"unknown layer kind {kind!r}")


def _expect_image(kind, in_shape):
    if len(in_shape) != 3:
        raise ConfigError(f"{kind} needs an image input (c, h, w), got per-sample shape {in_shape}")
    return in_shape


def build_stack(specs, in_shape, rng, dtype):
    """Build and initialize a layer list, propagating shapes; returns (layers, out_shape)."""
    layers = []
    shape = tuple(in_shape)
    for spec in specs:
        layer, shape = build_layer(spec, shape, dtype)
        layer.init_params(rng)
        layers.append(layer)
    return layers, shape


def run_forward(layers, x, mode=EVAL, rng=None):
    """Forward through a stack; returns (y, caches) with one cache per layer."""
    caches = []
    for layer in layers:
        x, cache = layer.forward(x, mode, rng)
        caches.append(cache)
    return x, caches


def run_backward(layers, grad, caches):
    """Backward through a stack using per-branch caches; accumulates parameter grads."""
    if len(caches) != len(layers):
        raise SevenError(f"cache list length {len(caches)} does not match stack depth {len(layers)}")
    for layer, cache in zip(reversed(layers), reversed(caches)):
        grad = layer.backward(grad, cache)
    return grad
