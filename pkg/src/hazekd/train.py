"""Optimisation loops, checkpointing, and experiment configuration.

Two-phase protocol: the super-resolution teacher is trained first on
(downsampled clear -> clear) pairs, then frozen; the student trains on
(hazy -> clear) pairs, optionally with feature-affinity guidance terms
computed against the frozen teacher's taps on the paired clear images
(full-resolution input in "HR" mode, half-size in "LR" mode).

Everything is deterministic per (seed, config): parameter init, batch
order, and therefore metric histories and checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import downsample, images_to_tensor
from .distill import FALossConfig, fa_term, pair_taps, total_loss
from .metrics import psnr, ssim
from .student import (StudentConfig, StudentNet, adapter_channels_for,
                      student_loss)
from .teacher import BranchConfig, TeacherNet, teacher_loss


class NanGradientError(RuntimeError):
    """A gradient went NaN; message names the offending parameter."""


# --------------------------------------------------------------------------
# Adam.
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state, lr):
    """Bias-corrected Adam update, in place.  Frozen parameters
    (requires_grad False) are skipped; missing gradients count as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1 ** state.t
    correct2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NanGradientError(
                f"non-finite gradient for parameter {name!r} "
                f"(shape {tuple(p.shape)}) at step {state.t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / correct1
        vhat = v / correct2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def clip_gradients(named_params, max_norm):
    """Scale all gradients down if their joint L2 norm exceeds max_norm."""
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = np.float32(max_norm / norm)
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def zero_grads(named_params):
    for _, p in named_params:
        p.grad = None


# --------------------------------------------------------------------------
# Config.
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    phase: str = "distill"          # teacher | student | distill
    epochs: int | None = None       # default: 20 for teacher, 200 otherwise
    batch_size: int = 2
    lr0: float = 1e-5
    lr_decay: float = 0.98
    lr_decay_every: int = 10
    seed: int = 0
    clip_norm: float = 5.0
    teacher_resolution: str = "HR"  # which input the frozen teacher sees
    fa: FALossConfig = field(default_factory=FALossConfig)
    teacher: BranchConfig = field(default_factory=BranchConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    max_steps: int | None = None    # optional hard cap (overfit checks)
    stop_loss: float | None = None  # early stop once train loss dips below

    def __post_init__(self):
        if self.phase not in ("teacher", "student", "distill"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.epochs is None:
            self.epochs = 20 if self.phase == "teacher" else 200
        if self.epochs < 1 or self.batch_size < 1 or self.lr0 <= 0:
            raise ValueError("epochs, batch_size, lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr decay must lie in (0, 1], got {self.lr_decay}")
        if self.teacher_resolution not in ("HR", "LR"):
            raise ValueError(f"teacher_resolution must be HR or LR, "
                             f"got {self.teacher_resolution!r}")


def lr_at(epoch, cfg):
    """Learning rate at a given epoch: lr0 decayed every lr_decay_every."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


# Flat key=value serialisation (config files and manifests).

_CONFIG_KEYS = {
    "phase": str, "epochs": int, "batch_size": int, "lr0": float,
    "lr_decay": float, "lr_decay_every": int, "seed": int,
    "clip_norm": float, "teacher_resolution": str,
    "max_steps": int, "stop_loss": float,
    "fa_kind": str, "w_fa": float, "pool_factor": float, "fa_gram": int,
    "teacher_d": int, "teacher_s": int, "teacher_m": int,
    "teacher_scale": int, "teacher_dsc": int, "teacher_activation": str,
    "student_width": int, "student_outer_blocks": int,
    "student_reduction": int,
}


def config_to_text(cfg):
    pairs = [
        ("phase", cfg.phase), ("epochs", cfg.epochs),
        ("batch_size", cfg.batch_size), ("lr0", cfg.lr0),
        ("lr_decay", cfg.lr_decay), ("lr_decay_every", cfg.lr_decay_every),
        ("seed", cfg.seed), ("clip_norm", cfg.clip_norm),
        ("teacher_resolution", cfg.teacher_resolution),
        ("fa_kind", cfg.fa.kind), ("w_fa", cfg.fa.w_fa),
        ("pool_factor", cfg.fa.pool_factor), ("fa_gram", int(cfg.fa.gram)),
        ("teacher_d", cfg.teacher.d), ("teacher_s", cfg.teacher.s),
        ("teacher_m", cfg.teacher.m), ("teacher_scale", cfg.teacher.scale),
        ("teacher_dsc", int(cfg.teacher.use_dsc)),
        ("teacher_activation", cfg.teacher.activation),
        ("student_width", cfg.student.width),
        ("student_outer_blocks", cfg.student.outer_blocks),
        ("student_reduction", cfg.student.reduction),
    ]
    if cfg.max_steps is not None:
        pairs.append(("max_steps", cfg.max_steps))
    if cfg.stop_loss is not None:
        pairs.append(("stop_loss", cfg.stop_loss))
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


def config_from_text(text):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, "
                             f"got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        raw[key] = _CONFIG_KEYS[key](value)
    fa = FALossConfig(kind=raw.pop("fa_kind", "l2"),
                      w_fa=raw.pop("w_fa", 0.25),
                      pool_factor=raw.pop("pool_factor", 0.25),
                      gram=bool(raw.pop("fa_gram", 1)))
    teacher = BranchConfig(d=raw.pop("teacher_d", 56),
                           s=raw.pop("teacher_s", 12),
                           m=raw.pop("teacher_m", 4),
                           scale=raw.pop("teacher_scale", 2),
                           use_dsc=bool(raw.pop("teacher_dsc", 0)),
                           activation=raw.pop("teacher_activation", "prelu"))
    student = StudentConfig(
        width=raw.pop("student_width", 16),
        outer_blocks=raw.pop("student_outer_blocks", 3),
        reduction=raw.pop("student_reduction", 8),
        adapter_channels=None)  # resolved against the teacher at build time
    return TrainConfig(fa=fa, teacher=teacher, student=student, **raw)


def load_config(path):
    return config_from_text(Path(path).read_text())


# --------------------------------------------------------------------------
# Training loops.
# --------------------------------------------------------------------------

def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_teacher(cfg, train_images, val_images=(), out_dir=None):
    """Pre-train the teacher on (downsampled clear -> clear) pairs.

    Returns (net, history); history rows are dicts with epoch/split/loss/
    psnr/ssim.  Saves the best-validation-loss checkpoint under out_dir.
    """
    if not train_images:
        raise T.ConfigError("train_teacher: empty dataset")
    net = TeacherNet(cfg.teacher, seed=cfg.seed)
    if net.frozen:
        raise T.UsageError("cannot train a frozen teacher")
    params = list(net.named_params())
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    scale = cfg.teacher.scale
    lr_in = [downsample(im, scale) for im in train_images]
    history = []
    best = (np.inf, None)
    steps = 0
    done = False
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        epoch_losses = []
        for batch in _epoch_batches(len(train_images), cfg.batch_size, rng):
            x = images_to_tensor([lr_in[i] for i in batch])
            y = images_to_tensor([train_images[i] for i in batch])
            zero_grads(params)
            with T.Tape() as tape:
                sr, _ = net.forward(x)
                loss = teacher_loss(sr, y)
            tape.backward(loss, params=[p for _, p in params])
            clip_gradients(params, cfg.clip_norm)
            adam_step(params, state, lr)
            epoch_losses.append(loss.item())
            steps += 1
            if cfg.stop_loss is not None and epoch_losses[-1] < cfg.stop_loss:
                done = True
                break
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                done = True
                break
        train_loss = float(np.mean(epoch_losses))
        history.append({"epoch": epoch, "split": "train", "loss": train_loss,
                        "psnr": "", "ssim": ""})
        if val_images:
            val_loss, val_psnr, val_ssim = _eval_teacher(net, val_images, scale)
            history.append({"epoch": epoch, "split": "val", "loss": val_loss,
                            "psnr": val_psnr, "ssim": val_ssim})
            if val_loss < best[0]:
                best = (val_loss, {n: p.data.copy() for n, p in params})
        if done:
            break
    if best[1] is not None:
        for name, p in params:
            p.data = best[1][name]
    if out_dir is not None:
        save_checkpoint(net, Path(out_dir) / "teacher.hkd")
    return net, history


def _eval_teacher(net, images, scale):
    losses, psnrs, ssims = [], [], []
    with T.no_grad():
        for im in images:
            x = images_to_tensor([downsample(im, scale)])
            y = images_to_tensor([im])
            sr, _ = net.forward(x)
            losses.append(teacher_loss(sr, y).item())
            from .data import ImageRGB
            sr_img = ImageRGB.from_tensor(sr, clamp=True)
            psnrs.append(psnr(sr_img, im))
            ssims.append(ssim(sr_img, im))
    return float(np.mean(losses)), float(np.mean(psnrs)), float(np.mean(ssims))


def build_student_for(cfg, teacher=None):
    """Student whose adapters match the teacher's tap widths (when given)."""
    student_cfg = cfg.student
    if student_cfg.adapter_channels is None or teacher is not None:
        student_cfg = replace(
            student_cfg,
            adapter_channels=adapter_channels_for(
                teacher if teacher is not None else cfg.teacher,
                student_cfg.outer_blocks))
    return StudentNet(student_cfg, seed=cfg.seed)


def train_student(cfg, train_pairs, val_pairs=(), teacher=None, out_dir=None,
                  checkpoint_name="student.hkd"):
    """Train the dehazing student, optionally under a frozen teacher.

    With teacher=None this is the pure reconstruction baseline; otherwise
    each step adds w_fa-weighted feature-affinity terms between the
    student's adapter taps on hazy inputs and the teacher's taps on the
    paired clear images.  Only student (+adapter) parameters update.
    """
    if not train_pairs:
        raise T.ConfigError("train_student: empty dataset")
    if teacher is not None and not teacher.frozen:
        raise T.UsageError("distillation requires a frozen teacher")
    net = build_student_for(cfg, teacher)
    params = list(net.named_params())
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    use_fa = teacher is not None and cfg.fa.w_fa > 0
    teacher_in = None
    if teacher is not None:
        teacher_in = [_teacher_view(p.clear, cfg) for p in train_pairs]
    hazy = [p.hazy for p in train_pairs]
    clear = [p.clear for p in train_pairs]
    history = []
    best = (-np.inf, None)
    steps = 0
    done = False
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        epoch_losses = []
        for batch in _epoch_batches(len(train_pairs), cfg.batch_size, rng):
            x = images_to_tensor([hazy[i] for i in batch])
            y = images_to_tensor([clear[i] for i in batch])
            zero_grads(params)
            with T.Tape() as tape:
                out, taps = net.forward(x, need_taps=use_fa)
                mse = student_loss(out, y)
                if use_fa:
                    tin = images_to_tensor([teacher_in[i] for i in batch])
                    _, t_taps = teacher.forward(tin, need_sr=False)
                    terms = [fa_term(st, tt, cfg.fa)
                             for st, tt in pair_taps(taps, t_taps)]
                    loss = total_loss(mse, terms, cfg.fa)
                else:
                    loss = mse
            tape.backward(loss, params=[p for _, p in params])
            clip_gradients(params, cfg.clip_norm)
            adam_step(params, state, lr)
            epoch_losses.append(mse.item())
            steps += 1
            if cfg.stop_loss is not None and epoch_losses[-1] < cfg.stop_loss:
                done = True
                break
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                done = True
                break
        train_loss = float(np.mean(epoch_losses))
        history.append({"epoch": epoch, "split": "train", "loss": train_loss,
                        "psnr": "", "ssim": ""})
        if val_pairs:
            val_loss, val_psnr, val_ssim = _eval_student(net, val_pairs)
            history.append({"epoch": epoch, "split": "val", "loss": val_loss,
                            "psnr": val_psnr, "ssim": val_ssim})
            if val_psnr > best[0]:
                best = (val_psnr, {n: p.data.copy() for n, p in params})
        if done:
            break
    if best[1] is not None:
        for name, p in params:
            p.data = best[1][name]
    if out_dir is not None:
        save_checkpoint(net, Path(out_dir) / checkpoint_name)
    return net, history


def _teacher_view(clear_image, cfg):
    """Input the frozen teacher consumes during distillation: the clear
    image at full resolution (HR) or half size (LR)."""
    if cfg.teacher_resolution == "HR":
        return clear_image
    return downsample(clear_image, 2)


def _eval_student(net, pairs):
    losses, psnrs, ssims = [], [], []
    with T.no_grad():
        for p in pairs:
            x = images_to_tensor([p.hazy])
            y = images_to_tensor([p.clear])
            out, _ = net.forward(x, need_taps=False)
            losses.append(student_loss(out, y).item())
            from .data import ImageRGB
            img = ImageRGB.from_tensor(out, clamp=True)
            psnrs.append(psnr(img, p.clear))
            ssims.append(ssim(img, p.clear))
    return float(np.mean(losses)), float(np.mean(psnrs)), float(np.mean(ssims))


def history_to_csv(history, path):
    def fmt(v):
        return "" if v == "" else repr(float(v))

    lines = ["epoch,split,loss,psnr,ssim"]
    for row in history:
        lines.append(f"{row['epoch']},{row['split']},{fmt(row['loss'])},"
                     f"{fmt(row['psnr'])},{fmt(row['ssim'])}")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Checkpoints: magic "HKD1", little-endian table of named f32 tensors.
# --------------------------------------------------------------------------

MAGIC = b"HKD1"
DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


class MagicError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


def _net_meta(net):
    """Architecture scalars stored as tiny meta tensors so a checkpoint can
    be loaded without a pre-built network."""
    if isinstance(net, TeacherNet):
        c = net.cfg
        return {"meta.kind": np.float32([0]),
                "meta.teacher": np.float32(
                    [c.d, c.s, c.m, c.scale, int(c.use_dsc),
                     0 if c.activation == "prelu" else 1, int(net.frozen)])}
    if isinstance(net, StudentNet):
        c = net.cfg
        return {"meta.kind": np.float32([1]),
                "meta.student": np.float32(
                    [c.width, c.outer_blocks, c.reduction]),
                "meta.adapters": np.float32(list(c.adapter_channels))}
    raise CheckpointError(f"cannot checkpoint object of type {type(net)}")


def _net_from_meta(arrays):
    kind = int(arrays["meta.kind"][0])
    if kind == 0:
        d, s, m, scale, dsc, act, frozen = arrays["meta.teacher"]
        cfg = BranchConfig(d=int(d), s=int(s), m=int(m), scale=int(scale),
                           use_dsc=bool(dsc),
                           activation="prelu" if act == 0 else "relu")
        net = TeacherNet(cfg)
        if frozen:
            net.freeze()
        return net
    if kind == 1:
        width, k, red = arrays["meta.student"]
        cfg = StudentConfig(width=int(width), outer_blocks=int(k),
                            reduction=int(red),
                            adapter_channels=tuple(
                                int(c) for c in arrays["meta.adapters"]))
        return StudentNet(cfg)
    raise CheckpointError(f"unknown checkpoint kind {kind}")


def save_checkpoint(net, path):
    entries = dict(net.named_params())
    arrays = {name: p.data for name, p in entries.items()}
    arrays.update(_net_meta(net))
    save_tensor_file(arrays, path)


def save_tensor_file(arrays, path):
    names = list(arrays)
    table = bytearray()
    payload = bytearray()
    table += MAGIC
    table += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<BB", DTYPE_F32, arr.ndim)
        table += struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += arr.tobytes(order="C")
    blob = bytes(table) + struct.pack("<Q", len(payload)) + bytes(payload)
    Path(path).write_bytes(blob)


def load_tensor_file(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        metas = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if dtype != DTYPE_F32:
                raise CheckpointError(f"{path}: unsupported dtype {dtype}")
            metas.append((name, dims, offset))
        (payload_len,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except struct.error as exc:
        raise TruncationError(f"{path}: truncated header ({exc})") from exc
    payload = raw[pos:]
    if len(payload) != payload_len:
        raise TruncationError(
            f"{path}: payload is {len(payload)} bytes, header says "
            f"{payload_len}")
    arrays = {}
    for name, dims, offset in metas:
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
        if offset + nbytes > payload_len:
            raise TruncationError(
                f"{path}: tensor {name!r} extends past payload end")
        arrays[name] = np.frombuffer(
            payload, dtype="<f4", count=nbytes // 4, offset=offset
        ).reshape(dims).copy()
    return arrays


def load_checkpoint(path, net=None, skip_adapters=False):
    """Rebuild (or fill) a network from an HKD1 file.

    With net=None the architecture is reconstructed from the stored meta
    entries.  Unknown parameter names raise UnknownParameterError; shape
    mismatches surface as DimensionError with both shapes.
    """
    arrays = load_tensor_file(path)
    values = {k: v for k, v in arrays.items() if not k.startswith("meta.")}
    if net is None:
        net = _net_from_meta(arrays)
    from . import nn

    try:
        nn.load_param_dict(net, values,
                           skip_prefixes=("adapter",) if skip_adapters else ())
    except KeyError as exc:
        raise UnknownParameterError(f"{path}: {exc.args[0]}") from exc
    return net
