"""Image-quality metrics and computational benchmarking.

PSNR uses MAX = 1.0 and a documented 100 dB sentinel for zero MSE (keeps
CSV output finite).  SSIM is the windowed form with an 11x11 Gaussian
(sigma 1.5), K1 = 0.01, K2 = 0.03, L = 1, valid-mode windows, channels
averaged.

FLOP estimates are static (never execute the network) and use the
FLOPs = 2 x MAC convention; conventions in the wild differ by exactly this
factor of two, so it is stated here once and used everywhere.  Latency is
wall-clock over the deployment artifact only (the student without its
adapters), measured exclusively: do not run anything else concurrently.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from . import tensor as T

PSNR_SENTINEL_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pixels(image):
    return image.pixels if hasattr(image, "pixels") else np.asarray(image)


def psnr(a, b):
    """10*log10(1 / MSE) in dB over all pixels and channels; inputs in
    [0, 1] so the peak value is 1."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise T.DimensionError(f"psnr: shapes {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa.astype(np.float64) - pb.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _window_means(img, kernel):
    wins = sliding_window_view(img, kernel.shape)
    return np.tensordot(wins, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b):
    """Mean structural similarity over sliding Gaussian windows, averaged
    across the three channels.  Values lie in [-1, 1]."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise T.DimensionError(f"ssim: shapes {pa.shape} vs {pb.shape}")
    if pa.shape[0] < SSIM_WINDOW or pa.shape[1] < SSIM_WINDOW:
        raise T.ConfigError(
            f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
            f"got {pa.shape[:2]}")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    scores = []
    for c in range(pa.shape[2]):
        x = pa[:, :, c].astype(np.float64)
        y = pb[:, :, c].astype(np.float64)
        mu_x = _window_means(x, kernel)
        mu_y = _window_means(y, kernel)
        xx = _window_means(x * x, kernel) - mu_x ** 2
        yy = _window_means(y * y, kernel) - mu_y ** 2
        xy = _window_means(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class QualityReport:
    psnr_db: float
    ssim: float
    per_image: list = field(default_factory=list)  # (id, psnr, ssim)


def quality_report(pairs_iter):
    """Aggregate PSNR/SSIM over (id, output, reference) triples."""
    per_image = []
    for image_id, out, ref in pairs_iter:
        per_image.append((image_id, psnr(out, ref), ssim(out, ref)))
    if not per_image:
        raise ValueError("quality_report: no images")
    return QualityReport(
        psnr_db=float(np.mean([p for _, p, _ in per_image])),
        ssim=float(np.mean([s for _, _, s in per_image])),
        per_image=per_image)


# --------------------------------------------------------------------------
# Compute benchmarking.
# --------------------------------------------------------------------------

@dataclass
class ComputeReport:
    params: int
    size_mb: float
    gflops: float
    latency_ms_mean: float
    latency_ms_std: float
    latency_ms_min: float


def model_size_mb(params):
    return params * 4 / 2 ** 20


def estimate_flops(net, input_shape):
    """Static FLOP count (2 x MACs for convolutions, per-element counts for
    activations and elementwise work) for one sample of ``input_shape`` =
    (C, H, W).  Unknown layer types raise AnalysisError naming them."""
    if not isinstance(net, nn.Layer):
        raise nn.AnalysisError(
            f"cannot analyse object of type {type(net).__name__}")
    flops, _ = net.flops(tuple(input_shape))
    return flops / 1e9


def time_inference(net, image, n_runs=20, warmup=3):
    """Wall-clock latency of deployment inference; returns per-run durations
    plus mean/std/min in milliseconds.  Must run exclusively (no concurrent
    benchmarks) for the numbers to mean anything."""
    if n_runs < 10 or warmup < 3:
        raise ValueError("need n_runs >= 10 and warmup >= 3")
    x = image.to_tensor() if hasattr(image, "to_tensor") else image
    with T.no_grad():
        for _ in range(warmup):
            net.forward(x, need_taps=False)
        times = []
        for _ in range(n_runs):
            start = time.perf_counter()
            net.forward(x, need_taps=False)
            times.append((time.perf_counter() - start) * 1e3)
    times = np.asarray(times)
    return {"mean_ms": float(times.mean()), "std_ms": float(times.std()),
            "min_ms": float(times.min()), "runs_ms": times.tolist()}


def compute_report(net, input_hw, n_runs=20, warmup=3, params=None):
    """Parameter count, serialized size, static GFLOPs, and measured latency
    for one (C=3) input of ``input_hw`` = (H, W)."""
    from .data import ImageRGB

    if params is None:
        params = net.count_params()
    h, w = input_hw
    probe = ImageRGB(np.zeros((h, w, 3), dtype=np.float32))
    timing = time_inference(net, probe, n_runs=n_runs, warmup=warmup)
    return ComputeReport(
        params=params,
        size_mb=model_size_mb(params),
        gflops=estimate_flops(net, (3, h, w)),
        latency_ms_mean=timing["mean_ms"],
        latency_ms_std=timing["std_ms"],
        latency_ms_min=timing["min_ms"])


def compute_report_markdown(rows):
    """Render [(label, ComputeReport)] in the benchmark table layout."""
    lines = ["| Model | Parameters (Mil.) | Size (MB) | GFLOPS | "
             "Inference Time (ms) |",
             "|---|---|---|---|---|"]
    for label, r in rows:
        lines.append(
            f"| {label} | {r.params / 1e6:.4f} | {r.size_mb:.3f} | "
            f"{r.gflops:.3f} | {r.latency_ms_mean:.3f} ± "
            f"{r.latency_ms_std:.3f} |")
    return "\n".join(lines) + "\n"


def compute_report_csv(rows):
    lines = ["model,params,size_mb,gflops,latency_ms_mean,latency_ms_std,"
             "latency_ms_min"]
    for label, r in rows:
        lines.append(f"{label},{r.params},{r.size_mb!r},{r.gflops!r},"
                     f"{r.latency_ms_mean!r},{r.latency_ms_std!r},"
                     f"{r.latency_ms_min!r}")
    return "\n".join(lines) + "\n"
