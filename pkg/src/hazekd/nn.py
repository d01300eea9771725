"""Layer objects shared by the teacher and student networks.

A Layer owns its parameter tensors, runs the forward pass through the
autodiff ops in ``tensor``, and can statically report parameter and FLOP
counts for benchmarking (FLOPs = 2 x multiply-accumulates for convolutions,
one FLOP per element for activations and elementwise work).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class AnalysisError(TypeError):
    """Static analysis hit a layer type it does not know how to count."""


class Layer:
    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_params(self, prefix=""):
        """Yield (name, tensor) pairs; subclasses with parameters override."""
        return
        yield

    def params(self):
        return [p for _, p in self.named_params()]

    def count_params(self):
        return sum(p.size for p in self.params())

    def flops(self, chw):
        """Return (flop_count, output_chw) for one input sample of shape
        (C, H, W).  Pure arithmetic; never executes the layer."""
        raise AnalysisError(f"no FLOP model for layer type {type(self).__name__}")


def _named(prefix, name):
    return f"{prefix}.{name}" if prefix else name


def kaiming(rng, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d(Layer):
    """3x3/5x5/1x1 convolution; ``reflect=True`` swaps the zero padding for
    reflect padding of the same width (used throughout the student)."""

    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0,
                 groups=1, bias=True, reflect=False, zero_init=False):
        self.spec = T.ConvSpec(cin, cout, kernel, kernel, stride=stride,
                               padding=0 if reflect else padding,
                               groups=groups)
        self.reflect = padding if reflect else 0
        wshape = (cout, cin // groups, kernel, kernel)
        fan_in = (cin // groups) * kernel * kernel
        wdata = np.zeros(wshape, dtype=np.float32) if zero_init \
            else kaiming(rng, wshape, fan_in)
        self.w = T.parameter(wdata)
        self.b = T.parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        if self.reflect:
            x = T.reflect_pad2d(x, self.reflect)
        return T.conv2d(x, self.w, self.b, self.spec)

    def named_params(self, prefix=""):
        yield _named(prefix, "w"), self.w
        if self.b is not None:
            yield _named(prefix, "b"), self.b

    def flops(self, chw):
        c, h, w = chw
        pad = self.reflect if self.reflect else self.spec.padding
        oh = (h + 2 * pad - self.spec.kernel_h) // self.spec.stride + 1
        ow = (w + 2 * pad - self.spec.kernel_w) // self.spec.stride + 1
        macs = self.spec.out_channels * oh * ow * \
            (self.spec.in_channels // self.spec.groups) * \
            self.spec.kernel_h * self.spec.kernel_w
        n = 2 * macs
        if self.b is not None:
            n += self.spec.out_channels * oh * ow
        return n, (self.spec.out_channels, oh, ow)


class DSConv2d(Layer):
    """Depthwise 3x3 (or kxk) followed by a pointwise 1x1 convolution."""

    def __init__(self, rng, cin, cout, kernel, bias=True):
        self.depthwise = Conv2d(rng, cin, cin, kernel, padding=kernel // 2,
                                groups=cin, bias=bias)
        self.pointwise = Conv2d(rng, cin, cout, 1, bias=bias)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))

    def named_params(self, prefix=""):
        yield from self.depthwise.named_params(_named(prefix, "dw"))
        yield from self.pointwise.named_params(_named(prefix, "pw"))

    def flops(self, chw):
        n1, mid = self.depthwise.flops(chw)
        n2, out = self.pointwise.flops(mid)
        return n1 + n2, out


class ConvTranspose2d(Layer):
    def __init__(self, rng, cin, cout, kernel, stride, padding, bias=True):
        self.spec = T.ConvSpec(cin, cout, kernel, kernel, stride=stride,
                               padding=padding)
        fan_in = cin * kernel * kernel
        self.w = T.parameter(kaiming(rng, (cin, cout, kernel, kernel), fan_in))
        self.b = T.parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return T.conv_transpose2d(x, self.w, self.spec, bias=self.b)

    def named_params(self, prefix=""):
        yield _named(prefix, "w"), self.w
        if self.b is not None:
            yield _named(prefix, "b"), self.b

    def flops(self, chw):
        c, h, w = chw
        oh = (h - 1) * self.spec.stride - 2 * self.spec.padding + self.spec.kernel_h
        ow = (w - 1) * self.spec.stride - 2 * self.spec.padding + self.spec.kernel_w
        macs = self.spec.in_channels * h * w * self.spec.out_channels * \
            self.spec.kernel_h * self.spec.kernel_w
        n = 2 * macs
        if self.b is not None:
            n += self.spec.out_channels * oh * ow
        return n, (self.spec.out_channels, oh, ow)


class ReLU(Layer):
    def forward(self, x):
        return T.relu(x)

    def flops(self, chw):
        c, h, w = chw
        return c * h * w, chw


class PReLU(Layer):
    """Per-channel learnable negative slope, initialised to 0.25."""

    def __init__(self, channels):
        self.slope = T.parameter(np.full(channels, 0.25, dtype=np.float32))

    def forward(self, x):
        return T.prelu(x, self.slope)

    def named_params(self, prefix=""):
        yield _named(prefix, "slope"), self.slope

    def flops(self, chw):
        c, h, w = chw
        return 2 * c * h * w, chw


class Sigmoid(Layer):
    def forward(self, x):
        return T.sigmoid(x)

    def flops(self, chw):
        c, h, w = chw
        return 4 * c * h * w, chw


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(_named(prefix, str(i)))

    def flops(self, chw):
        total = 0
        for layer in self.layers:
            n, chw = layer.flops(chw)
            total += n
        return total, chw


def make_activation(kind, channels):
    if kind == "prelu":
        return PReLU(channels)
    if kind == "relu":
        return ReLU()
    raise ValueError(f"unknown activation {kind!r}")


def load_param_dict(net, values, skip_prefixes=()):
    """Copy a {name: array} mapping into a network's parameters in place.

    Unknown names raise KeyError; shape mismatches raise DimensionError.
    """
    params = dict(net.named_params())
    for name, arr in values.items():
        if any(name.startswith(p) for p in skip_prefixes):
            continue
        if name not in params:
            raise KeyError(f"unknown parameter name {name!r}")
        p = params[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise T.DimensionError(
                f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} "
                f"vs network shape {tuple(p.shape)}")
        p.data = np.ascontiguousarray(arr, dtype=np.float32)
