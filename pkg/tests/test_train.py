"""Training loops: optimizer, freezing, label blindness, checkpoints, resume."""

import numpy as np
import pytest

from medtex import data as D
from medtex import engine as E
from medtex import train as T
from medtex.errors import FormatError, ValidationError

SIZE = 32


@pytest.fixture(scope="module")
def teacher_ckpt(tiny_dataset32_module):
    cfg = T.TrainConfig(epochs=60, seed=3, image_size=SIZE, patience=0)
    return T.pretrain_teacher(tiny_dataset32_module, cfg)


@pytest.fixture(scope="module")
def tiny_dataset32_module():
    return D.generate_dataset(4, 4, SIZE, seed=7)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        T.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        T.TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        T.TrainConfig(lam=-1.0)
    with pytest.raises(ValidationError):
        T.TrainConfig(mode="turbo")


def test_adam_minimizes_quadratic():
    p = E.parameter(np.array([5.0, -3.0]))
    opt = T.Adam([("p", p)], lr=0.05)
    for _ in range(500):
        loss = E.tsum(E.square(p))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-3


def test_images_only_view_is_label_blind(tiny_dataset32_module):
    view = T.ImagesOnlyView(tiny_dataset32_module)
    assert len(view) == 8
    assert view.batch(np.array([0, 3])).shape == (2, 3, SIZE, SIZE)
    assert not hasattr(view, "labels")
    assert not hasattr(view, "masks")
    with pytest.raises(ValidationError):
        T.ImagesOnlyView(np.zeros((4, SIZE, SIZE)))


def test_pretrain_one_batch_overfit(tiny_dataset32_module):
    """8 samples for 300 steps must reach training accuracy 1.0."""
    cfg = T.TrainConfig(epochs=1000, seed=1, image_size=SIZE, patience=0)
    ck = T.pretrain_teacher(tiny_dataset32_module, cfg, max_steps=300)
    teacher = T.teacher_from_checkpoint(ck)
    preds = teacher.predict(tiny_dataset32_module.images()).argmax(axis=1)
    assert (preds == tiny_dataset32_module.labels()).all()
    assert ck.counters["global_step"] == 300


def test_teacher_checkpoint_reload_identical_metrics(tiny_dataset32_module, teacher_ckpt,
                                                     tmp_path):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    probs_a = teacher.predict(tiny_dataset32_module.images())
    path = T.save_checkpoint(teacher_ckpt, tmp_path / "t.ckpt")
    again = T.teacher_from_checkpoint(T.load_checkpoint(path, expect_kind="teacher"))
    probs_b = again.predict(tiny_dataset32_module.images())
    assert np.array_equal(probs_a, probs_b)


def test_distill_modes_and_frozen_teacher(tiny_dataset32_module, teacher_ckpt):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    before = T.parameter_digest(teacher)
    view = T.ImagesOnlyView(tiny_dataset32_module)
    for mode in ("student_only", "med_ex", "med_tex"):
        cfg = T.TrainConfig(epochs=1, seed=2, mode=mode, image_size=SIZE, patience=0)
        ck = T.distill(teacher, view, cfg, max_steps=2)
        assert ck.kind == "distill"
        fl = ck.extra["final_loss"]
        if mode == "med_tex":
            assert len(fl["l_intermediate"]) == 4
        else:
            assert fl["l_intermediate"] == []
            assert fl["total"] == fl["l_output"]
        assert T.parameter_digest(teacher) == before


def test_med_ex_metrics_mark_intermediate_na(tiny_dataset32_module, teacher_ckpt, tmp_path):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    cfg = T.TrainConfig(epochs=1, seed=2, mode="med_ex", image_size=SIZE, patience=0)
    T.distill(teacher, T.ImagesOnlyView(tiny_dataset32_module), cfg,
              out_dir=tmp_path, max_steps=2)
    lines = (tmp_path / "metrics.tsv").read_text().strip().splitlines()
    for line in lines:
        cols = line.split("\t")
        assert cols[2:6] == ["n/a"] * 4
        assert cols[1] == cols[6]  # total equals the output loss


def test_label_blindness_on_disk(tiny_dataset32_module, teacher_ckpt, tmp_path):
    """Corrupting labels (and swapping masks to keep the layout consistent)
    must not change distillation results: only images are ever read."""
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    d = tmp_path / "ds"
    D.save_dataset(tiny_dataset32_module, d)

    def run():
        ds = D.load_dataset(d)
        cfg = T.TrainConfig(epochs=1, seed=5, mode="med_ex", image_size=SIZE, patience=0)
        ck = T.distill(teacher, T.ImagesOnlyView(ds), cfg, max_steps=2)
        return {k: v.copy() for k, v in ck.arrays.items() if k.startswith("param/")}

    first = run()
    # swap the label and mask assignment of a (normal, abnormal) pair on disk
    manifest = (d / "manifest").read_text().splitlines()
    header_end = manifest.index("")
    rows = [l.split() for l in manifest[header_end + 1:] if l]
    normal = next(r for r in rows if r[1] == "0")
    abnormal = next(r for r in rows if r[1] == "1")
    normal[1], abnormal[1] = "1", "0"
    normal[3], abnormal[3] = abnormal[3], normal[3]
    normal[5], abnormal[5] = abnormal[5], normal[5]
    text = "\n".join(manifest[:header_end + 1] + [" ".join(r) for r in rows]) + "\n"
    (d / "manifest").write_text(text)
    second = run()
    assert set(first) == set(second)
    for k in first:
        assert np.array_equal(first[k], second[k]), k


def test_lambda_zero_matches_med_ex_exactly(tiny_dataset32_module, teacher_ckpt):
    """med_tex with lambda = 0 must walk the same trajectory as med_ex."""
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    view = T.ImagesOnlyView(tiny_dataset32_module)
    cfg_tex = T.TrainConfig(epochs=1, seed=9, mode="med_tex", lam=0.0,
                            image_size=SIZE, patience=0)
    cfg_ex = T.TrainConfig(epochs=1, seed=9, mode="med_ex", lam=0.0,
                           image_size=SIZE, patience=0)
    ck_tex = T.distill(teacher, view, cfg_tex, max_steps=3)
    ck_ex = T.distill(teacher, view, cfg_ex, max_steps=3)
    assert ck_tex.extra["final_loss"]["total"] == ck_ex.extra["final_loss"]["total"]
    for k, v in ck_ex.arrays.items():
        if k.startswith("param/student") or k.startswith("param/explainer"):
            assert np.array_equal(v, ck_tex.arrays[k]), k


def test_seeded_bit_determinism(tiny_dataset32_module, teacher_ckpt, tmp_path):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    view = T.ImagesOnlyView(tiny_dataset32_module)
    cfg = T.TrainConfig(epochs=1, seed=4, mode="med_tex", image_size=SIZE, patience=0)
    T.distill(teacher, view, cfg, out_dir=tmp_path / "a", max_steps=3)
    T.distill(teacher, view, cfg, out_dir=tmp_path / "b", max_steps=3)
    ma = (tmp_path / "a" / "metrics.tsv").read_bytes()
    assert ma == (tmp_path / "b" / "metrics.tsv").read_bytes()
    ca = (tmp_path / "a" / "distill.ckpt").read_bytes()
    assert ca == (tmp_path / "b" / "distill.ckpt").read_bytes()


def test_checkpoint_save_load_save_identical(tiny_dataset32_module, teacher_ckpt, tmp_path):
    p1 = T.save_checkpoint(teacher_ckpt, tmp_path / "a.ckpt")
    loaded = T.load_checkpoint(p1)
    p2 = T.save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_kind_and_arch_errors(tiny_dataset32_module, teacher_ckpt, tmp_path):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    cfg = T.TrainConfig(epochs=1, seed=2, mode="student_only", image_size=SIZE, patience=0)
    ck = T.distill(teacher, T.ImagesOnlyView(tiny_dataset32_module), cfg, max_steps=1)
    path = T.save_checkpoint(ck, tmp_path / "student.ckpt")
    with pytest.raises(FormatError) as exc:
        T.load_checkpoint(path, expect_kind="teacher")
    msg = str(exc.value)
    assert "teacher" in msg and "distill" in msg and "student" in msg
    with pytest.raises(FormatError):
        T.teacher_from_checkpoint(ck)


def test_checkpoint_truncation_and_magic(tmp_path, teacher_ckpt):
    p = T.save_checkpoint(teacher_ckpt, tmp_path / "t.ckpt")
    raw = p.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        T.load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(FormatError):
        T.load_checkpoint(tmp_path / "junk.ckpt")


def test_resume_reproduces_uninterrupted_run(tiny_dataset32_module, teacher_ckpt, tmp_path):
    """Stop after 4 steps, resume, and compare every later loss to a
    single uninterrupted run."""
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    view = T.ImagesOnlyView(tiny_dataset32_module)
    cfg = T.TrainConfig(epochs=14, seed=6, mode="med_ex", image_size=SIZE, patience=0)

    full_dir = tmp_path / "full"
    T.distill(teacher, view, cfg, out_dir=full_dir)  # 14 steps (1 batch/epoch)

    part_dir = tmp_path / "part"
    mid = T.distill(teacher, view, cfg, out_dir=part_dir, max_steps=4)
    assert mid.counters["global_step"] == 4
    resumed = T.distill(teacher, view, cfg, out_dir=part_dir, resume=mid)
    assert resumed.counters["global_step"] == 14
    assert (full_dir / "metrics.tsv").read_text() == (part_dir / "metrics.tsv").read_text()
    full_ck = T.load_checkpoint(full_dir / "distill.ckpt")
    for k, v in full_ck.arrays.items():
        assert np.array_equal(v, resumed.arrays[k]), k


def test_resume_rejects_config_mismatch(tiny_dataset32_module, teacher_ckpt):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    view = T.ImagesOnlyView(tiny_dataset32_module)
    cfg = T.TrainConfig(epochs=2, seed=6, mode="med_ex", image_size=SIZE, patience=0)
    mid = T.distill(teacher, view, cfg, max_steps=1)
    other = T.TrainConfig(epochs=2, seed=7, mode="med_ex", image_size=SIZE, patience=0)
    with pytest.raises(ValidationError):
        T.distill(teacher, view, other, resume=mid)


def test_distill_shape_mismatch_and_pipeline(tiny_dataset32_module, teacher_ckpt):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    cfg = T.TrainConfig(epochs=1, seed=2, mode="med_tex", image_size=64, patience=0)
    with pytest.raises(ValidationError):
        T.distill(teacher, T.ImagesOnlyView(tiny_dataset32_module), cfg, max_steps=1)
    cfg32 = T.TrainConfig(epochs=1, seed=2, mode="med_tex", image_size=SIZE, patience=0)
    ck = T.distill(teacher, T.ImagesOnlyView(tiny_dataset32_module), cfg32, max_steps=1)
    pipe = T.StudentPipeline(T.bundle_from_checkpoint(ck))
    probs = pipe.predict(tiny_dataset32_module.images())
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    sel = pipe.selection_map(tiny_dataset32_module.samples[0].image)
    assert sel.values.shape == (3, SIZE, SIZE)
    assert 0.0 <= sel.values.min() and sel.values.max() <= 1.0


def test_student_only_pipeline_has_no_selection(tiny_dataset32_module, teacher_ckpt):
    teacher = T.teacher_from_checkpoint(teacher_ckpt)
    cfg = T.TrainConfig(epochs=1, seed=2, mode="student_only", image_size=SIZE, patience=0)
    ck = T.distill(teacher, T.ImagesOnlyView(tiny_dataset32_module), cfg, max_steps=1)
    pipe = T.StudentPipeline(T.bundle_from_checkpoint(ck))
    with pytest.raises(ValidationError):
        pipe.selection_map(tiny_dataset32_module.samples[0].image)
