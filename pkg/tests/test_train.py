"""Optimiser, schedule, checkpoint, and training-loop tests."""

import numpy as np
import pytest

from hazekd import data as D
from hazekd import tensor as T
from hazekd import train as TR
from hazekd.distill import FALossConfig
from hazekd.student import StudentConfig, StudentNet
from hazekd.teacher import BranchConfig, TeacherNet

TEACHER_TINY = BranchConfig(d=8, s=4, m=1)
STUDENT_TINY = StudentConfig(width=4, outer_blocks=1, reduction=2,
                             adapter_channels=(4,))


def tiny_cfg(**kw):
    base = dict(phase="distill", epochs=2, batch_size=2, lr0=1e-3, seed=7,
                teacher=TEACHER_TINY, student=STUDENT_TINY)
    base.update(kw)
    return TR.TrainConfig(**base)


def make_pairs(n, seed=0, size=(32, 32)):
    pairs = []
    children = np.random.SeedSequence(seed).spawn(n)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        clear = D.procedural_clear_image(rng, *size)
        pair, _ = D.synthesize_pair(rng, clear, f"p{i}")
        pairs.append(pair)
    return pairs


# ----------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_params():
    p = T.parameter(np.array([1.0, -2.0], dtype=np.float32))
    p.grad = np.zeros(2, dtype=np.float32)
    state = TR.AdamState()
    before = p.data.copy()
    TR.adam_step([("p", p)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 1


def test_adam_first_step_magnitude():
    p = T.parameter(np.array([0.0], dtype=np.float32))
    p.grad = np.array([1.0], dtype=np.float32)
    TR.adam_step([("p", p)], TR.AdamState(), lr=0.01)
    # bias-corrected first step is -lr * g/(|g| + eps') ~= -lr
    assert p.data[0] == pytest.approx(-0.01, rel=1e-4)


def test_adam_skips_frozen():
    p = T.parameter(np.array([1.0], dtype=np.float32))
    p.grad = np.array([1.0], dtype=np.float32)
    p.requires_grad = False
    TR.adam_step([("p", p)], TR.AdamState(), lr=0.5)
    assert p.data[0] == 1.0


def test_adam_nan_gradient_names_parameter():
    p = T.parameter(np.array([1.0], dtype=np.float32), name="w")
    p.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(TR.NanGradientError, match="outer0.conv1.w"):
        TR.adam_step([("outer0.conv1.w", p)], TR.AdamState(), lr=0.1)


def test_adam_deterministic_over_100_steps():
    def run():
        rng = np.random.default_rng(5)
        p = T.parameter(rng.standard_normal(8).astype(np.float32))
        state = TR.AdamState()
        for _ in range(100):
            p.grad = (p.data * 0.3 + 0.1).astype(np.float32)
            TR.adam_step([("p", p)], state, lr=1e-3)
        return p.data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_clip_gradients():
    p = T.parameter(np.zeros(3, dtype=np.float32))
    p.grad = np.array([3.0, 4.0, 0.0], dtype=np.float32)
    norm = TR.clip_gradients([("p", p)], max_norm=1.0)
    assert norm == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)


# ------------------------------------------------------------- schedule

def test_lr_schedule_reference_points():
    cfg = TR.TrainConfig(phase="student")
    assert TR.lr_at(0, cfg) == pytest.approx(1e-5, abs=0)
    assert TR.lr_at(10, cfg) == pytest.approx(9.8e-6, abs=1e-12)
    assert TR.lr_at(25, cfg) == pytest.approx(9.604e-6, abs=1e-12)


def test_lr_non_increasing():
    cfg = TR.TrainConfig(phase="student")
    values = [TR.lr_at(e, cfg) for e in range(0, 120)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        TR.lr_at(-1, cfg)


def test_config_defaults():
    cfg = TR.TrainConfig(phase="teacher")
    assert cfg.epochs == 20
    assert TR.TrainConfig(phase="student").epochs == 200
    assert TR.TrainConfig(phase="distill").epochs == 200
    assert cfg.batch_size == 2
    assert cfg.lr0 == 1e-5
    assert cfg.fa.w_fa == 0.25
    assert cfg.teacher_resolution == "HR"


def test_config_text_roundtrip():
    cfg = tiny_cfg(teacher_resolution="LR", fa=FALossConfig(kind="kl"))
    text = TR.config_to_text(cfg)
    back = TR.config_from_text(text)
    assert back.fa.kind == "kl"
    assert back.teacher_resolution == "LR"
    assert back.teacher.d == TEACHER_TINY.d
    assert back.student.width == STUDENT_TINY.width
    assert back.epochs == cfg.epochs and back.seed == cfg.seed


def test_config_text_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown key"):
        TR.config_from_text("nonsense=1\n")
    with pytest.raises(ValueError, match="key=value"):
        TR.config_from_text("just words\n")


# ------------------------------------------------------------ training

def test_train_teacher_empty_dataset():
    with pytest.raises(T.ConfigError, match="empty"):
        TR.train_teacher(tiny_cfg(phase="teacher"), [])


def test_train_teacher_loss_decreases(tmp_path):
    pairs = make_pairs(2)
    cfg = tiny_cfg(phase="teacher", epochs=30, lr0=2e-3, batch_size=2)
    net, history = TR.train_teacher(cfg, [p.clear for p in pairs],
                                    val_images=[pairs[0].clear],
                                    out_dir=tmp_path)
    train_rows = [r for r in history if r["split"] == "train"]
    assert all(np.isfinite(r["loss"]) for r in train_rows)
    assert train_rows[-1]["loss"] <= train_rows[0]["loss"]
    assert (tmp_path / "teacher.hkd").exists()


def test_train_student_requires_frozen_teacher():
    pairs = make_pairs(2)
    teacher = TeacherNet(TEACHER_TINY)
    with pytest.raises(T.UsageError, match="frozen"):
        TR.train_student(tiny_cfg(), pairs, teacher=teacher)


def test_student_baseline_ignores_teacher_machinery():
    pairs = make_pairs(2)
    cfg = tiny_cfg(epochs=1)
    net, history = TR.train_student(cfg, pairs)
    assert all(np.isfinite(r["loss"]) for r in history)


def test_distill_gradients_reach_adapters_not_teacher():
    pairs = make_pairs(2)
    cfg = tiny_cfg(epochs=1)
    teacher = TeacherNet(TEACHER_TINY, seed=1).freeze()
    net = TR.build_student_for(cfg, teacher)
    params = list(net.named_params())
    x = D.images_to_tensor([pairs[0].hazy])
    y = D.images_to_tensor([pairs[0].clear])
    from hazekd.distill import fa_term, pair_taps, total_loss
    from hazekd.student import student_loss

    with T.Tape() as tape:
        out, taps = net.forward(x)
        _, t_taps = teacher.forward(y, need_sr=False)
        terms = [fa_term(s, t, cfg.fa) for s, t in pair_taps(taps, t_taps)]
        loss = total_loss(student_loss(out, y), terms, cfg.fa)
    tape.backward(loss, params=[p for _, p in params])
    adapter_grads = [p.grad for n, p in params if n.startswith("adapter")]
    assert adapter_grads and all(g is not None and np.any(g != 0)
                                 for g in adapter_grads)
    for _, p in teacher.named_params():
        assert p.grad is None


def test_teacher_params_unchanged_by_distillation():
    pairs = make_pairs(4)
    teacher = TeacherNet(TEACHER_TINY, seed=1).freeze()

    before = {n: p.data.tobytes() for n, p in teacher.named_params()}
    TR.train_student(tiny_cfg(epochs=1), pairs, teacher=teacher)
    after = {n: p.data.tobytes() for n, p in teacher.named_params()}
    assert before == after


def test_distill_run_deterministic(tmp_path):
    pairs = make_pairs(4)
    teacher = TeacherNet(TEACHER_TINY, seed=1).freeze()

    def run(tag):
        out = tmp_path / tag
        out.mkdir()
        net, history = TR.train_student(tiny_cfg(), pairs[:3], pairs[3:],
                                        teacher=teacher, out_dir=out)
        TR.history_to_csv(history, out / "history.csv")
        return ((out / "student.hkd").read_bytes(),
                (out / "history.csv").read_text())

    ck_a, hist_a = run("a")
    ck_b, hist_b = run("b")
    assert ck_a == ck_b
    assert hist_a == hist_b


def test_lr_resolution_affects_teacher_input():
    pairs = make_pairs(1)
    hr = TR._teacher_view(pairs[0].clear, tiny_cfg(teacher_resolution="HR"))
    lr = TR._teacher_view(pairs[0].clear, tiny_cfg(teacher_resolution="LR"))
    assert (hr.height, hr.width) == (32, 32)
    assert (lr.height, lr.width) == (16, 16)


def test_history_csv_format(tmp_path):
    rows = [{"epoch": 0, "split": "train", "loss": 0.5, "psnr": "", "ssim": ""},
            {"epoch": 0, "split": "val", "loss": 0.4, "psnr": 21.0,
             "ssim": 0.9}]
    path = tmp_path / "h.csv"
    TR.history_to_csv(rows, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,split,loss,psnr,ssim"
    assert lines[1] == "0,train,0.5,,"
    assert lines[2] == "0,val,0.4,21.0,0.9"


# ---------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(rng, tmp_path):
    net = StudentNet(STUDENT_TINY, seed=2)
    x = T.constant(rng.random((1, 3, 16, 16)).astype(np.float32))
    before, _ = net.forward(x)
    path = tmp_path / "s.hkd"
    TR.save_checkpoint(net, path)
    loaded = TR.load_checkpoint(path)
    after, _ = loaded.forward(x)
    assert np.array_equal(before.data, after.data)
    assert loaded.cfg == net.cfg


def test_checkpoint_teacher_roundtrip(rng, tmp_path):
    net = TeacherNet(TEACHER_TINY, seed=3).freeze()
    path = tmp_path / "t.hkd"
    TR.save_checkpoint(net, path)
    loaded = TR.load_checkpoint(path)
    assert loaded.frozen
    x = T.constant(rng.random((1, 3, 16, 16)).astype(np.float32))
    a, _ = net.forward(x)
    b, _ = loaded.forward(x)
    assert np.array_equal(a.data, b.data)


def test_checkpoint_magic_error(tmp_path):
    path = tmp_path / "bad.hkd"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(TR.MagicError):
        TR.load_checkpoint(path)


def test_checkpoint_truncation_error(tmp_path):
    net = StudentNet(STUDENT_TINY)
    path = tmp_path / "s.hkd"
    TR.save_checkpoint(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 100])
    with pytest.raises(TR.TruncationError):
        TR.load_checkpoint(path)


def test_checkpoint_unknown_parameter(tmp_path):
    net = StudentNet(STUDENT_TINY)
    path = tmp_path / "s.hkd"
    TR.save_checkpoint(net, path)
    arrays = TR.load_tensor_file(path)
    arrays["mystery.w"] = np.zeros(3, dtype=np.float32)
    TR.save_tensor_file(arrays, path)
    with pytest.raises(TR.UnknownParameterError, match="mystery"):
        TR.load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    net = StudentNet(STUDENT_TINY)
    path = tmp_path / "s.hkd"
    TR.save_checkpoint(net, path)
    other = StudentNet(StudentConfig(width=8, outer_blocks=1, reduction=2,
                                     adapter_channels=(4,)))
    with pytest.raises(T.DimensionError, match="checkpoint shape"):
        TR.load_checkpoint(path, net=other)


def test_checkpoint_skip_adapters(tmp_path):
    net = StudentNet(STUDENT_TINY, seed=2)
    path = tmp_path / "s.hkd"
    TR.save_checkpoint(net, path)
    fresh = StudentNet(STUDENT_TINY, seed=9)
    adapter_before = fresh.adapters[0].w.data.copy()
    TR.load_checkpoint(path, net=fresh, skip_adapters=True)
    np.testing.assert_array_equal(fresh.adapters[0].w.data, adapter_before)
    np.testing.assert_array_equal(fresh.stem.w.data, net.stem.w.data)


def test_checkpoint_size_arithmetic(tmp_path):
    net = StudentNet()
    path = tmp_path / "s.hkd"
    TR.save_checkpoint(net, path)
    n_params = net.count_params(include_adapters=True)
    size = path.stat().st_size
    assert n_params * 4 < size < n_params * 4 + 20_000  # header overhead
    assert size < 2 ** 20  # the serialized default student stays under 1 MB
