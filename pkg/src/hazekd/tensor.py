"""Dense float tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the teacher/student networks
and their losses need (convolutions, pooling, attention arithmetic, batched
matmul, reductions).  Tensors store a flat row-major float array in
batch x channel x height x width layout for images.  Gradients are computed
by recording every op on an explicit ``Tape`` and replaying it backwards;
creation order is topological order, so the backward sweep visits each node
exactly once.

Arithmetic runs in float32 by default.  Tensors may be built as float64 so
that finite-difference oracles can replay the same graph at higher
precision; production code never does this.

No implicit broadcasting, with two deliberate exceptions in ``hadamard``:
per-channel attention weights (B,C,1,1) and per-pixel attention maps
(B,1,H,W) multiply against (B,C,H,W) activations.  Everything else raises
loudly on shape mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class DimensionError(ValueError):
    """Operand shapes are inconsistent; message names the offending axes."""


class ConfigError(ValueError):
    """An op was configured with impossible parameters (groups, strides...)."""


class UsageError(RuntimeError):
    """An op was called in a state it does not support (e.g. backward on a
    non-scalar)."""


class Tensor:
    """N-dimensional float array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"


@dataclass
class ConvSpec:
    """Static description of a 2-d convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h,
               self.kernel_w, self.stride) < 1 or self.padding < 0:
            raise ConfigError(f"non-positive conv dimensions: {self}")
        if self.groups < 1:
            raise ConfigError(f"groups must be positive, got {self.groups}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels not divisible by groups: in={self.in_channels} "
                f"out={self.out_channels} groups={self.groups}")


# --------------------------------------------------------------------------
# Tape: explicit reverse-mode record.
# --------------------------------------------------------------------------

class Tape:
    """Ordered record of recorded ops, replayed in reverse by backward().

    Single-owner: one training step owns one tape.  Entering a tape makes it
    the active recording target; ops executed while no tape is active run in
    no-gradient mode and produce constants.
    """

    def __init__(self):
        self.nodes = []  # (out_tensor, backward_fn) in creation order

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss, params=()):
        """Accumulate d(loss)/d(x) into ``x.grad`` for every participating
        tensor; parameters listed in ``params`` that did not participate get
        a zero gradient.  ``loss`` must be a scalar produced under this tape.
        """
        if loss.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


_TAPE_STACK: list = []


class no_grad:
    """Context manager that suspends recording (used for frozen networks)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_out(data, inputs, backward_fn):
    """Wrap a forward result; record the backward closure if a tape is live
    and any input wants gradients."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.nodes.append((out, backward_fn))
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, name=None, dtype=None):
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


# --------------------------------------------------------------------------
# Elementwise arithmetic and reductions.
# --------------------------------------------------------------------------

def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make_out(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make_out(a.data - b.data, (a, b), bwd)


def hadamard(a, b):
    """Elementwise product.  Identical shapes, or one operand may be a
    (B,C,1,1) channel weight or (B,1,H,W) pixel map against (B,C,H,W)."""
    if a.shape != b.shape:
        if not _attention_broadcast_ok(a.shape, b.shape):
            raise DimensionError(
                f"hadamard: shapes {a.shape} and {b.shape} are neither equal "
                "nor a supported attention broadcast")

    def bwd(g):
        _accum_bcast(a, g * b.data)
        _accum_bcast(b, g * a.data)

    return _make_out(a.data * b.data, (a, b), bwd)


def _attention_broadcast_ok(sa, sb):
    if len(sa) != 4 or len(sb) != 4:
        return False
    small, big = (sa, sb) if np.prod(sa) < np.prod(sb) else (sb, sa)
    if small[0] != big[0]:
        return False
    channel_weight = small[1] == big[1] and small[2] == small[3] == 1
    pixel_map = small[1] == 1 and small[2:] == big[2:]
    return channel_weight or pixel_map


def _accum_bcast(t, g):
    """Accumulate g into t.grad, summing over axes t was broadcast along."""
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        axes = tuple(i for i in range(g.ndim) if t.shape[i] == 1 and g.shape[i] > 1)
        g = g.sum(axis=axes, keepdims=True)
    _accum(t, g)


def scale(a, s):
    s = float(s)

    def bwd(g):
        _accum(a, g * s)

    return _make_out(a.data * s, (a,), bwd)


def add_scalar(a, s):
    s = float(s)

    def bwd(g):
        _accum(a, g)

    return _make_out(a.data + s, (a,), bwd)


def sum_all(a):
    def bwd(g):
        _accum(a, np.full_like(a.data, g.reshape(())[()]))

    return _make_out(a.data.sum(dtype=a.dtype), (a,), bwd)


def mean_all(a):
    n = a.size

    def bwd(g):
        _accum(a, np.full_like(a.data, g.reshape(())[()] / n))

    return _make_out(a.data.mean(dtype=a.dtype), (a,), bwd)


def log(a):
    if np.any(a.data <= 0):
        raise UsageError("log: input has non-positive entries")
    out_data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make_out(out_data, (a,), bwd)


def abs_(a):
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)

    return _make_out(np.abs(a.data), (a,), bwd)


def normalize_last(a, eps=1e-8):
    """Shift by eps and divide by the sum along the last axis, so each row
    sums to one.  Requires non-negative input for a probability reading."""
    shifted = a.data + a.dtype.type(eps)
    total = shifted.sum(axis=-1, keepdims=True)
    y = shifted / total

    def bwd(g):
        _accum(a, (g - (g * y).sum(axis=-1, keepdims=True)) / total)

    return _make_out(y, (a,), bwd)


# --------------------------------------------------------------------------
# Activations.
# --------------------------------------------------------------------------

def relu(a):
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g):
        _accum(a, g * mask)

    return _make_out(a.data * mask, (a,), bwd)


def prelu(a, slope):
    """Parametric ReLU with a learnable per-channel negative slope.

    ``slope`` is a 1-d tensor of length C (axis 1 of a 4-d input) or a single
    scalar shared by all elements.
    """
    if slope.ndim > 1:
        raise DimensionError(f"prelu: slope must be scalar or 1-d, got {slope.shape}")
    if slope.size > 1:
        if a.ndim != 4 or a.shape[1] != slope.size:
            raise DimensionError(
                f"prelu: per-channel slope of length {slope.size} does not "
                f"match input {a.shape}")
        s = slope.data.reshape(1, -1, 1, 1)
    else:
        s = slope.data.reshape(())
    neg = a.data < 0
    out_data = np.where(neg, a.data * s, a.data)

    def bwd(g):
        _accum(a, np.where(neg, g * s, g))
        gs = g * a.data * neg
        if slope.size > 1:
            _accum(slope, gs.sum(axis=(0, 2, 3)))
        else:
            _accum(slope, gs.sum(dtype=a.dtype).reshape(slope.shape))

    return _make_out(out_data, (a, slope), bwd)


def sigmoid(a):
    y = expit(a.data)

    def bwd(g):
        _accum(a, g * y * (1.0 - y))

    return _make_out(y, (a,), bwd)


# --------------------------------------------------------------------------
# Shape ops.
# --------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: {a.shape} -> {shape} changes size")

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make_out(a.data.reshape(shape), (a,), bwd)


def flatten_spatial(a):
    """(B,C,H,W) -> (B,C,H*W)."""
    if a.ndim != 4:
        raise DimensionError(f"flatten_spatial expects 4-d input, got {a.shape}")
    b, c, h, w = a.shape

    def bwd(g):
        _accum(a, g.reshape(b, c, h, w))

    return _make_out(a.data.reshape(b, c, h * w), (a,), bwd)


def transpose_last2(a):
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2 expects >=2-d input, got {a.shape}")

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.swapaxes(-1, -2)))

    return _make_out(np.ascontiguousarray(a.data.swapaxes(-1, -2)), (a,), bwd)


def batched_matmul(a, b):
    """Matrix product over the last two axes; leading batch axes must match
    exactly (2-d inputs multiply as plain matrices)."""
    if a.ndim != b.ndim or a.ndim < 2:
        raise DimensionError(f"batched_matmul: ranks {a.ndim} and {b.ndim}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"batched_matmul: batch axes {a.shape[:-2]} != {b.shape[:-2]}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"batched_matmul: inner axes {a.shape[-1]} != {b.shape[-2]}")

    def bwd(g):
        _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _make_out(np.matmul(a.data, b.data), (a, b), bwd)


def concat_channels(tensors):
    """Concatenate 4-d tensors along the channel axis."""
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (
                ref.shape[0], ref.shape[2], ref.shape[3]):
            raise DimensionError(
                f"concat_channels: {t.shape} incompatible with {ref.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bwd(g):
        for t, gpart in zip(tensors, np.split(g, splits, axis=1)):
            _accum(t, gpart)

    return _make_out(np.concatenate([t.data for t in tensors], axis=1),
                     tuple(tensors), bwd)


def slice_channels(a, lo, hi):
    if a.ndim != 4 or not (0 <= lo < hi <= a.shape[1]):
        raise DimensionError(f"slice_channels[{lo}:{hi}] on {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        _accum(a, full)

    return _make_out(a.data[:, lo:hi].copy(), (a,), bwd)


def reflect_pad2d(a, pad):
    """Reflect-pad the two spatial axes.  ``pad`` is a single width or a
    (top, bottom, left, right) tuple; reflection excludes the edge sample,
    so each pad amount must be < the corresponding input extent."""
    if a.ndim != 4:
        raise DimensionError(f"reflect_pad2d expects 4-d input, got {a.shape}")
    if isinstance(pad, int):
        pt = pb = pl = pr = pad
    else:
        pt, pb, pl, pr = pad
    h, w = a.shape[2], a.shape[3]
    if max(pt, pb) >= h or max(pl, pr) >= w:
        raise ConfigError(f"reflect pad {pad} too large for spatial {h}x{w}")
    out_data = np.pad(a.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="reflect")

    def bwd(g):
        ga = g[:, :, pt:pt + h, pl:pl + w].copy()
        # fold reflected rows/cols back onto their sources
        for i in range(pt):
            ga[:, :, pt - i, :] += g[:, :, i, pl:pl + w]
        for i in range(pb):
            ga[:, :, h - 2 - i, :] += g[:, :, pt + h + i, pl:pl + w]
        for j in range(pl):
            ga[:, :, :, pl - j] += g[:, :, pt:pt + h, j]
        for j in range(pr):
            ga[:, :, :, w - 2 - j] += g[:, :, pt:pt + h, pl + w + j]
        # corners reflect through both axes
        for i in range(pt):
            for j in range(pl):
                ga[:, :, pt - i, pl - j] += g[:, :, i, j]
            for j in range(pr):
                ga[:, :, pt - i, w - 2 - j] += g[:, :, i, pl + w + j]
        for i in range(pb):
            for j in range(pl):
                ga[:, :, h - 2 - i, pl - j] += g[:, :, pt + h + i, j]
            for j in range(pr):
                ga[:, :, h - 2 - i, w - 2 - j] += g[:, :, pt + h + i, pl + w + j]
        _accum(a, ga)

    return _make_out(out_data, (a,), bwd)


# --------------------------------------------------------------------------
# Convolutions.
# --------------------------------------------------------------------------

def _conv_out_size(h, w, spec):
    oh = (h + 2 * spec.padding - spec.kernel_h) // spec.stride + 1
    ow = (w + 2 * spec.padding - spec.kernel_w) // spec.stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError(
            f"conv output would be {oh}x{ow} for input {h}x{w} with {spec}")
    if (h + 2 * spec.padding - spec.kernel_h) % spec.stride or \
       (w + 2 * spec.padding - spec.kernel_w) % spec.stride:
        raise ConfigError(
            f"stride {spec.stride} does not tile input {h}x{w} with {spec}")
    return oh, ow


def _im2col(xp, kh, kw, stride, oh, ow):
    """(B,C,Hp,Wp) -> (B, C*kh*kw, oh*ow) patch matrix (copies)."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,oh',ow',kh,kw
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def _col2im_add(gcols, xp_shape, kh, kw, stride, oh, ow):
    """Adjoint of _im2col: scatter-add patch gradients into a padded image."""
    b, c = xp_shape[:2]
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    gview = gcols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        ilim = i + stride * (oh - 1) + 1
        for j in range(kw):
            jlim = j + stride * (ow - 1) + 1
            gxp[:, :, i:ilim:stride, j:jlim:stride] += gview[:, :, i, j]
    return gxp


def _zero_pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias, spec):
    """2-d cross-correlation with zero padding.

    x: (B, Cin, H, W); weight: (Cout, Cin/groups, kh, kw); bias: (Cout,) or
    None.  groups == 1 is a dense convolution, groups == Cin with one weight
    channel is depthwise; other group counts fall back to a per-group loop.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-d, got {x.shape}")
    b, cin, h, w = x.shape
    if cin != spec.in_channels:
        raise DimensionError(
            f"conv2d: input channel axis is {cin}, spec expects {spec.in_channels}")
    expect_w = (spec.out_channels, spec.in_channels // spec.groups,
                spec.kernel_h, spec.kernel_w)
    if weight.shape != expect_w:
        raise DimensionError(
            f"conv2d: weight shape {weight.shape}, expected {expect_w}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape}, expected ({spec.out_channels},)")
    oh, ow = _conv_out_size(h, w, spec)
    s, p, kh, kw = spec.stride, spec.padding, spec.kernel_h, spec.kernel_w
    xp = _zero_pad(x.data, p)

    if spec.groups == 1:
        cols = _im2col(xp, kh, kw, s, oh, ow)
        w2 = weight.data.reshape(spec.out_channels, -1)
        out_data = np.matmul(w2[None], cols).reshape(b, spec.out_channels, oh, ow)
    elif spec.groups == cin and weight.shape[1] == 1:
        out_data = _depthwise_forward(xp, weight.data, s, oh, ow)
    else:
        out_data = _grouped_forward(xp, weight.data, spec, oh, ow)
    if bias is not None:
        out_data += bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        g2 = g.reshape(b, spec.out_channels, oh * ow)
        if spec.groups == 1:
            cols_b = _im2col(xp, kh, kw, s, oh, ow)
            if weight.requires_grad:
                gw = np.einsum("bol,bkl->ok", g2, cols_b, optimize=True)
                _accum(weight, gw.reshape(weight.shape))
            if x.requires_grad:
                w2_b = weight.data.reshape(spec.out_channels, -1)
                gcols = np.matmul(w2_b.T[None], g2)
                gxp = _col2im_add(gcols, xp.shape, kh, kw, s, oh, ow)
                _accum(x, gxp[:, :, p:p + h, p:p + w] if p else gxp)
        elif spec.groups == cin and weight.shape[1] == 1:
            _depthwise_backward(g, x, weight, xp, spec, oh, ow, p, h, w)
        else:
            _grouped_backward(g2, x, weight, xp, spec, oh, ow, p, h, w)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make_out(out_data, inputs, bwd)


def _depthwise_forward(xp, wd, stride, oh, ow):
    b, c = xp.shape[:2]
    kh, kw = wd.shape[2], wd.shape[3]
    out = np.zeros((b, c, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        ilim = i + stride * (oh - 1) + 1
        for j in range(kw):
            jlim = j + stride * (ow - 1) + 1
            out += wd[None, :, 0, i, j, None, None] * \
                xp[:, :, i:ilim:stride, j:jlim:stride]
    return out


def _depthwise_backward(g, x, weight, xp, spec, oh, ow, p, h, w):
    s = spec.stride
    kh, kw = spec.kernel_h, spec.kernel_w
    wd = weight.data
    if weight.requires_grad:
        gw = np.zeros_like(wd)
        for i in range(kh):
            ilim = i + s * (oh - 1) + 1
            for j in range(kw):
                jlim = j + s * (ow - 1) + 1
                gw[:, 0, i, j] = (g * xp[:, :, i:ilim:s, j:jlim:s]).sum(axis=(0, 2, 3))
        _accum(weight, gw)
    if x.requires_grad:
        gxp = np.zeros_like(xp)
        for i in range(kh):
            ilim = i + s * (oh - 1) + 1
            for j in range(kw):
                jlim = j + s * (ow - 1) + 1
                gxp[:, :, i:ilim:s, j:jlim:s] += wd[None, :, 0, i, j, None, None] * g
        _accum(x, gxp[:, :, p:p + h, p:p + w] if p else gxp)


def _grouped_forward(xp, wd, spec, oh, ow):
    b = xp.shape[0]
    cg_in = spec.in_channels // spec.groups
    cg_out = spec.out_channels // spec.groups
    out = np.empty((b, spec.out_channels, oh, ow), dtype=xp.dtype)
    for gi in range(spec.groups):
        cols = _im2col(xp[:, gi * cg_in:(gi + 1) * cg_in],
                       spec.kernel_h, spec.kernel_w, spec.stride, oh, ow)
        w2 = wd[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, -1)
        out[:, gi * cg_out:(gi + 1) * cg_out] = \
            np.matmul(w2[None], cols).reshape(b, cg_out, oh, ow)
    return out


def _grouped_backward(g2, x, weight, xp, spec, oh, ow, p, h, w):
    b = xp.shape[0]
    cg_in = spec.in_channels // spec.groups
    cg_out = spec.out_channels // spec.groups
    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    gxp = np.zeros_like(xp) if x.requires_grad else None
    gw = np.zeros_like(weight.data) if weight.requires_grad else None
    for gi in range(spec.groups):
        sl_in = slice(gi * cg_in, (gi + 1) * cg_in)
        sl_out = slice(gi * cg_out, (gi + 1) * cg_out)
        gg = g2[:, sl_out]
        cols = _im2col(xp[:, sl_in], kh, kw, s, oh, ow)
        if gw is not None:
            gw[sl_out] = np.einsum("bol,bkl->ok", gg, cols,
                                   optimize=True).reshape(cg_out, cg_in, kh, kw)
        if gxp is not None:
            w2 = weight.data[sl_out].reshape(cg_out, -1)
            gcols = np.matmul(w2.T[None], gg)
            gxp[:, sl_in] += _col2im_add(
                gcols, (b, cg_in) + xp.shape[2:], kh, kw, s, oh, ow)
    if gw is not None:
        _accum(weight, gw)
    if gxp is not None:
        _accum(x, gxp[:, :, p:p + h, p:p + w] if p else gxp)


def depthwise_separable_conv(x, dw_weight, pw_weight, biases=(None, None)):
    """Depthwise 2-d conv followed by a 1x1 pointwise conv.

    dw_weight: (Cin, 1, kh, kw); pw_weight: (Cout, Cin, 1, 1).  Padding for
    the depthwise stage keeps spatial dims (kernel must be odd).
    """
    cin = dw_weight.shape[0]
    if dw_weight.ndim != 4 or dw_weight.shape[1] != 1:
        raise DimensionError(
            f"depthwise weight must be (Cin,1,kh,kw), got {dw_weight.shape}")
    if pw_weight.ndim != 4 or pw_weight.shape[1:] != (cin, 1, 1):
        raise DimensionError(
            f"pointwise weight must be (Cout,{cin},1,1), got {pw_weight.shape}")
    kh, kw = dw_weight.shape[2], dw_weight.shape[3]
    dw_spec = ConvSpec(cin, cin, kh, kw, stride=1, padding=kh // 2, groups=cin)
    pw_spec = ConvSpec(cin, pw_weight.shape[0], 1, 1)
    mid = conv2d(x, dw_weight, biases[0], dw_spec)
    return conv2d(mid, pw_weight, biases[1], pw_spec)


def conv_transpose2d(x, weight, spec, bias=None):
    """Transposed convolution (the adjoint of conv2d forward w.r.t. input).

    x: (B, Cin, H, W); weight: (Cin, Cout, kh, kw).  Output spatial size is
    (H-1)*stride - 2*padding + kh.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose2d: input must be 4-d, got {x.shape}")
    b, cin, h, w = x.shape
    if cin != spec.in_channels:
        raise DimensionError(
            f"conv_transpose2d: input channels {cin} vs spec {spec.in_channels}")
    expect_w = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    if weight.shape != expect_w:
        raise DimensionError(
            f"conv_transpose2d: weight shape {weight.shape}, expected {expect_w}")
    s, p, kh, kw = spec.stride, spec.padding, spec.kernel_h, spec.kernel_w
    oh = (h - 1) * s - 2 * p + kh
    ow = (w - 1) * s - 2 * p + kw
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv_transpose2d output would be {oh}x{ow} ({spec})")
    cout = spec.out_channels

    w2 = weight.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(b, cin, h * w)
    cmap = np.matmul(w2.T[None], x2).reshape(b, cout, kh, kw, h, w)
    full = np.zeros((b, cout, (h - 1) * s + kh, (w - 1) * s + kw), dtype=x.dtype)
    for i in range(kh):
        ilim = i + s * (h - 1) + 1
        for j in range(kw):
            jlim = j + s * (w - 1) + 1
            full[:, :, i:ilim:s, j:jlim:s] += cmap[:, :, i, j]
    out_data = full[:, :, p:p + oh, p:p + ow].copy()
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(
                f"conv_transpose2d: bias shape {bias.shape}, expected ({cout},)")
        out_data += bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        gfull = np.zeros_like(full)
        gfull[:, :, p:p + oh, p:p + ow] = g
        gcols = np.empty((b, cout * kh * kw, h * w), dtype=g.dtype)
        gc = gcols.reshape(b, cout, kh, kw, h, w)
        for i in range(kh):
            ilim = i + s * (h - 1) + 1
            for j in range(kw):
                jlim = j + s * (w - 1) + 1
                gc[:, :, i, j] = gfull[:, :, i:ilim:s, j:jlim:s]
        if x.requires_grad:
            gx = np.matmul(w2[None], gcols).reshape(b, cin, h, w)
            _accum(x, gx)
        if weight.requires_grad:
            gw2 = np.einsum("bcl,bkl->ck", x2, gcols, optimize=True)
            _accum(weight, gw2.reshape(weight.shape))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make_out(out_data, inputs, bwd)


# --------------------------------------------------------------------------
# Pooling.
# --------------------------------------------------------------------------

def avg_pool2d(x, factor):
    """Average-pool by a fractional factor expressible as 1/k.  Dimensions
    not divisible by k are reflect-padded on the bottom/right up to the next
    multiple first, which preserves edge statistics."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects 4-d input, got {x.shape}")
    if factor > 1:
        raise ConfigError(f"pool factor must be <= 1, got {factor}")
    k = int(round(1.0 / factor))
    if abs(1.0 / factor - k) > 1e-9 or k < 1:
        raise ConfigError(f"pool factor {factor} is not 1/k for integer k")
    h, w = x.shape[2], x.shape[3]
    pad_h = (-h) % k
    pad_w = (-w) % k
    if pad_h or pad_w:
        x = reflect_pad2d(x, (0, pad_h, 0, pad_w))
        h, w = h + pad_h, w + pad_w
    b, c = x.shape[0], x.shape[1]
    oh, ow = h // k, w // k

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _accum(x, gx.astype(x.dtype))

    pooled = x.data.reshape(b, c, oh, k, ow, k).mean(axis=(3, 5), dtype=x.dtype)
    return _make_out(pooled, (x,), bwd)


def global_avg_pool(x):
    """(B,C,H,W) -> (B,C,1,1) per-channel spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n = x.shape[2] * x.shape[3]

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, x.shape).astype(x.dtype))

    return _make_out(x.data.mean(axis=(2, 3), keepdims=True, dtype=x.dtype),
                     (x,), bwd)
