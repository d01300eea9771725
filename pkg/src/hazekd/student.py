"""Lightweight dehazing student network.

A narrow, deep residual network: a stem convolution, K outer blocks (each a
chain of six inner blocks plus a trailing convolution under a long skip),
one fusion convolution, and a reconstruction convolution whose output is
added to the input image.  Inner blocks pair two 3x3 convolutions with
channel-level and pixel-level attention and a local skip.

The reconstruction convolution starts at zero, so a freshly initialised
network is the identity map; all 3x3 convolutions reflect-pad, so output
dims always equal input dims.  After each outer block a 1x1 adapter
projects the activation to the channel width of the teacher tap it is
paired with; adapters exist only for distillation and are excluded from
the deployment parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .teacher import FeatureTap

INNER_BLOCKS_PER_OUTER = 6


@dataclass
class StudentConfig:
    width: int = 16
    outer_blocks: int = 3
    reduction: int = 8
    # channel widths the per-block adapters project to; defaults match the
    # default teacher's taps (3*s, 3*d, 3*d) under the min(k, 1) pairing.
    # None defers the choice until a teacher is available.
    adapter_channels: tuple | None = (36, 168, 168)

    def __post_init__(self):
        if self.width < 1 or self.outer_blocks < 1 or self.reduction < 1:
            raise ValueError(f"invalid student config {self}")
        if self.adapter_channels is not None and \
                len(self.adapter_channels) != self.outer_blocks:
            raise ValueError(
                f"need one adapter width per outer block: "
                f"{self.adapter_channels} vs K={self.outer_blocks}")


class ChannelAttention(nn.Layer):
    """Per-channel gate: sigmoid(MLP(GAP(x))) in (0,1), applied as a
    (B,C,1,1) Hadamard weight."""

    def __init__(self, rng, channels, reduction):
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(rng, channels, hidden, 1)
        self.fc2 = nn.Conv2d(rng, hidden, channels, 1)

    def weights(self, x):
        h = T.relu(self.fc1(T.global_avg_pool(x)))
        return T.sigmoid(self.fc2(h))

    def forward(self, x):
        return T.hadamard(self.weights(x), x)

    def named_params(self, prefix=""):
        yield from self.fc1.named_params(nn._named(prefix, "fc1"))
        yield from self.fc2.named_params(nn._named(prefix, "fc2"))

    def flops(self, chw):
        c, h, w = chw
        n1, mid = self.fc1.flops((c, 1, 1))
        n2, _ = self.fc2.flops(mid)
        # GAP read + sigmoid + broadcast multiply
        return c * h * w + n1 + n2 + 5 * c + c * h * w, chw


class PixelAttention(nn.Layer):
    """Per-pixel gate: a single-channel sigmoid map in (0,1), applied as a
    (B,1,H,W) Hadamard weight across all channels."""

    def __init__(self, rng, channels, reduction):
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(rng, channels, hidden, 1)
        self.fc2 = nn.Conv2d(rng, hidden, 1, 1)

    def weights(self, x):
        return T.sigmoid(self.fc2(T.relu(self.fc1(x))))

    def forward(self, x):
        return T.hadamard(self.weights(x), x)

    def named_params(self, prefix=""):
        yield from self.fc1.named_params(nn._named(prefix, "fc1"))
        yield from self.fc2.named_params(nn._named(prefix, "fc2"))

    def flops(self, chw):
        c, h, w = chw
        n1, mid = self.fc1.flops(chw)
        n2, out1 = self.fc2.flops(mid)
        return n1 + mid[0] * h * w + n2 + 5 * h * w + c * h * w, chw


class InnerBlock(nn.Layer):
    def __init__(self, rng, channels, reduction):
        self.conv1 = nn.Conv2d(rng, channels, channels, 3, padding=1,
                               reflect=True)
        self.conv2 = nn.Conv2d(rng, channels, channels, 3, padding=1,
                               reflect=True)
        self.ca = ChannelAttention(rng, channels, reduction)
        self.pa = PixelAttention(rng, channels, reduction)

    def forward(self, x):
        h = self.conv2(T.relu(self.conv1(x)))
        h = self.ca(h)
        h = self.pa(h)
        return T.add(h, x)

    def named_params(self, prefix=""):
        for name, layer in (("conv1", self.conv1), ("conv2", self.conv2),
                            ("ca", self.ca), ("pa", self.pa)):
            yield from layer.named_params(nn._named(prefix, name))

    def flops(self, chw):
        c, h, w = chw
        total = 0
        for layer in (self.conv1, self.conv2, self.ca, self.pa):
            n, _ = layer.flops(chw)
            total += n
        return total + c * h * w * 2, chw  # relu + residual add


class OuterBlock(nn.Layer):
    def __init__(self, rng, channels, reduction):
        self.inner = [InnerBlock(rng, channels, reduction)
                      for _ in range(INNER_BLOCKS_PER_OUTER)]
        self.conv = nn.Conv2d(rng, channels, channels, 3, padding=1,
                              reflect=True)

    def forward(self, x):
        h = x
        for block in self.inner:
            h = block(h)
        return T.add(self.conv(h), x)

    def named_params(self, prefix=""):
        for i, block in enumerate(self.inner):
            yield from block.named_params(nn._named(prefix, f"inner{i}"))
        yield from self.conv.named_params(nn._named(prefix, "conv"))

    def flops(self, chw):
        c, h, w = chw
        total = 0
        for block in self.inner:
            n, _ = block.flops(chw)
            total += n
        n, _ = self.conv.flops(chw)
        return total + n + c * h * w, chw


class StudentNet(nn.Layer):
    def __init__(self, cfg=None, seed=0):
        cfg = cfg or StudentConfig()
        if cfg.adapter_channels is None:
            raise ValueError("adapter_channels unresolved; derive them from "
                             "a teacher via adapter_channels_for() first")
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        c = cfg.width
        self.stem = nn.Conv2d(rng, 3, c, 3, padding=1, reflect=True)
        self.outer = [OuterBlock(rng, c, cfg.reduction)
                      for _ in range(cfg.outer_blocks)]
        self.fusion = nn.Conv2d(rng, c, c, 3, padding=1, reflect=True)
        self.recon = nn.Conv2d(rng, c, 3, 3, padding=1, reflect=True,
                               zero_init=True)
        self.adapters = [nn.Conv2d(rng, c, out_c, 1)
                         for out_c in cfg.adapter_channels]

    def forward(self, x, need_taps=True):
        """x: (B, 3, H, W) hazy images, H, W >= 16.  Returns the raw
        (unclamped) dehazed batch and the adapter-projected taps."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise T.DimensionError(f"student expects (B,3,H,W), got {x.shape}")
        if min(x.shape[2], x.shape[3]) < 16:
            raise T.DimensionError(
                f"student needs spatial dims >= 16, got {x.shape}")
        f = self.stem(x)
        taps = []
        for k, block in enumerate(self.outer):
            f = block(f)
            if need_taps:
                taps.append(FeatureTap("student", k, self.adapters[k](f)))
        out = T.add(self.recon(self.fusion(f)), x)
        return out, taps

    def dehaze(self, image):
        """Inference convenience: ImageRGB in, clamped ImageRGB out."""
        from .data import ImageRGB

        with T.no_grad():
            out, _ = self.forward(image.to_tensor(), need_taps=False)
        return ImageRGB.from_tensor(out, clamp=True)

    def named_params(self, prefix="", include_adapters=True):
        yield from self.stem.named_params(nn._named(prefix, "stem"))
        for k, block in enumerate(self.outer):
            yield from block.named_params(nn._named(prefix, f"outer{k}"))
        yield from self.fusion.named_params(nn._named(prefix, "fusion"))
        yield from self.recon.named_params(nn._named(prefix, "recon"))
        if include_adapters:
            for k, adapter in enumerate(self.adapters):
                yield from adapter.named_params(nn._named(prefix, f"adapter{k}"))

    def count_params(self, include_adapters=False):
        return sum(p.size for _, p in
                   self.named_params(include_adapters=include_adapters))

    def adapter_params(self):
        return [p for k, a in enumerate(self.adapters)
                for _, p in a.named_params(f"adapter{k}")]

    def flops(self, chw):
        """Deployment cost: adapters excluded (training-only)."""
        c, h, w = chw
        if c != 3:
            raise nn.AnalysisError(f"student expects 3 channels, got {c}")
        total, shape = self.stem.flops(chw)
        for block in self.outer:
            n, shape = block.flops(shape)
            total += n
        n, shape = self.fusion.flops(shape)
        total += n
        n, shape = self.recon.flops(shape)
        total += n
        return total + 3 * h * w, (3, h, w)


def student_loss(dehazed, clear):
    """Mean squared error over all pixels and channels."""
    if dehazed.shape != clear.shape:
        raise T.DimensionError(f"student_loss: {dehazed.shape} vs {clear.shape}")
    diff = T.sub(dehazed, clear)
    return T.mean_all(T.hadamard(diff, diff))


def adapter_channels_for(teacher, outer_blocks):
    """Adapter widths pairing student tap k with teacher level min(k, 1).

    Accepts a TeacherNet or its BranchConfig.
    """
    tch = teacher.tap_channels if hasattr(teacher, "tap_channels") \
        else (3 * teacher.s, 3 * teacher.d)
    return tuple(tch[min(k, len(tch) - 1)] for k in range(outer_blocks))
