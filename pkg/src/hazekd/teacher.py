"""Multi-branch super-resolution teacher.

One compact super-resolution branch per color channel (feature extraction,
shrinking, mapping, expanding, learned deconvolution), trained on clear
images only and then frozen.  Its two pre-upsampling activations, the
post-mapping and post-expanding maps concatenated across the three branches,
are exported as guidance features for distillation.

The mapping stage optionally uses depthwise separable convolutions, which
keeps tap shapes and output dims identical while cutting the parameter
count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T


@dataclass
class BranchConfig:
    d: int = 56           # feature-extraction width
    s: int = 12           # shrink width
    m: int = 4            # mapping layers
    scale: int = 2        # upsampling factor
    use_dsc: bool = False
    activation: str = "prelu"

    def __post_init__(self):
        if not (self.d > self.s > 0):
            raise ValueError(f"need d > s > 0, got d={self.d} s={self.s}")
        if self.m < 1:
            raise ValueError(f"need at least one mapping layer, got m={self.m}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")


# deconvolution kernel: even 8x8 kernel so that integer padding gives an
# exact scale multiple: (H-1)*s - 2p + 8 == s*H  with  p = (8 - s) // 2
DECONV_KERNEL = 8


@dataclass
class FeatureTap:
    """A named intermediate activation exported for distillation."""

    source: str   # "teacher" | "student"
    level: int
    tensor: T.Tensor


class Branch(nn.Layer):
    """Single-channel super-resolution branch (1 -> 1 channels)."""

    def __init__(self, rng, cfg):
        act = cfg.activation
        self.cfg = cfg
        self.extract = nn.Conv2d(rng, 1, cfg.d, 5, padding=2)
        self.extract_act = nn.make_activation(act, cfg.d)
        self.shrink = nn.Conv2d(rng, cfg.d, cfg.s, 1)
        self.shrink_act = nn.make_activation(act, cfg.s)
        self.mapping = []
        for _ in range(cfg.m):
            conv = nn.DSConv2d(rng, cfg.s, cfg.s, 3) if cfg.use_dsc \
                else nn.Conv2d(rng, cfg.s, cfg.s, 3, padding=1)
            self.mapping.append((conv, nn.make_activation(act, cfg.s)))
        self.expand = nn.Conv2d(rng, cfg.s, cfg.d, 1)
        self.expand_act = nn.make_activation(act, cfg.d)
        self.deconv = nn.ConvTranspose2d(
            rng, cfg.d, 1, DECONV_KERNEL, stride=cfg.scale,
            padding=(DECONV_KERNEL - cfg.scale) // 2)

    def features(self, x):
        """Run up to (and excluding) the deconvolution; returns the
        post-mapping and post-expanding activations."""
        h = self.extract_act(self.extract(x))
        h = self.shrink_act(self.shrink(h))
        for conv, act in self.mapping:
            h = act(conv(h))
        mapped = h
        expanded = self.expand_act(self.expand(h))
        return mapped, expanded

    def forward(self, x):
        _, expanded = self.features(x)
        return self.deconv(expanded)

    def named_params(self, prefix=""):
        pairs = [("extract", self.extract), ("extract_act", self.extract_act),
                 ("shrink", self.shrink), ("shrink_act", self.shrink_act)]
        for i, (conv, act) in enumerate(self.mapping):
            pairs.append((f"map{i}", conv))
            pairs.append((f"map{i}_act", act))
        pairs += [("expand", self.expand), ("expand_act", self.expand_act),
                  ("deconv", self.deconv)]
        for name, layer in pairs:
            yield from layer.named_params(nn._named(prefix, name))

    def flops(self, chw):
        total, shape = self.extract.flops(chw)
        for layer in [self.extract_act, self.shrink, self.shrink_act]:
            n, shape = layer.flops(shape)
            total += n
        for conv, act in self.mapping:
            n, shape = conv.flops(shape)
            total += n
            n, shape = act.flops(shape)
            total += n
        for layer in [self.expand, self.expand_act, self.deconv]:
            n, shape = layer.flops(shape)
            total += n
        return total, shape


class TeacherNet(nn.Layer):
    """Three channel-specific branches whose outputs concatenate back into
    an RGB image; taps concatenate across branches per level."""

    def __init__(self, cfg=None, seed=0):
        cfg = cfg or BranchConfig()
        self.cfg = cfg
        self.frozen = False
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.branches = [Branch(rng, cfg) for _ in range(3)]

    @property
    def tap_channels(self):
        """Channel widths of the exported taps: (3*s, 3*d)."""
        return (3 * self.cfg.s, 3 * self.cfg.d)

    def forward(self, x, need_sr=True):
        """x: (B, 3, H, W) clear images.  Returns (sr, taps); ``sr`` is None
        when need_sr is False (tap-only mode used during distillation).
        Frozen teachers always run in no-gradient mode."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise T.DimensionError(f"teacher expects (B,3,H,W), got {x.shape}")
        if self.frozen:
            with T.no_grad():
                return self._forward(x.detach(), need_sr)
        return self._forward(x, need_sr)

    def _forward(self, x, need_sr):
        mapped, expanded, srs = [], [], []
        for c, branch in enumerate(self.branches):
            xc = T.slice_channels(x, c, c + 1)
            mc, ec = branch.features(xc)
            mapped.append(mc)
            expanded.append(ec)
            if need_sr:
                srs.append(branch.deconv(ec))
        taps = [FeatureTap("teacher", 0, T.concat_channels(mapped)),
                FeatureTap("teacher", 1, T.concat_channels(expanded))]
        sr = T.concat_channels(srs) if need_sr else None
        return sr, taps

    def named_params(self, prefix=""):
        for c, branch in enumerate(self.branches):
            yield from branch.named_params(nn._named(prefix, f"branch{c}"))

    def flops(self, chw):
        c, h, w = chw
        if c != 3:
            raise nn.AnalysisError(f"teacher expects 3 channels, got {c}")
        total = 0
        for branch in self.branches:
            n, out = branch.flops((1, h, w))
            total += n
        return total, (3, out[1], out[2])

    def freeze(self):
        """Mark pre-training complete: parameters stop receiving gradients
        and subsequent forwards run in no-gradient mode."""
        self.frozen = True
        for _, p in self.named_params():
            p.requires_grad = False
        return self


def teacher_loss(sr, hr):
    """Channel-level reconstruction error: per-channel pixel-mean squared
    difference, summed over channels (and averaged over the batch)."""
    if sr.shape != hr.shape:
        raise T.DimensionError(f"teacher_loss: {sr.shape} vs {hr.shape}")
    b, _, h, w = sr.shape
    diff = T.sub(sr, hr)
    return T.scale(T.sum_all(T.hadamard(diff, diff)), 1.0 / (b * h * w))


def count_params(net):
    """Exact number of stored scalars (teacher or student alike)."""
    return net.count_params()


def dsc_reduction(params_standard, params_dsc):
    """Relative size reduction, in percent, of the separable variant."""
    if params_standard <= 0:
        raise ValueError("standard parameter count must be positive")
    return (params_standard - params_dsc) / params_standard * 100.0
