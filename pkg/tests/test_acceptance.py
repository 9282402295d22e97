"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-3 and 8 are fast, exact or analytic checks.  Criteria 4-7 and 9
train real models: criterion 4 overfits 8 images at 32x32, criteria 5-7
run the desk-scale protocol (64x64, three seeds, three modes plus a 25%
training fraction) against a teacher pretrained to at least 0.95 test
accuracy.  Run with ``pytest tests/test_acceptance.py -v -s``; expect the
desk-scale part to be CPU-bound for tens of minutes.
"""

import numpy as np
import pytest

from medtex import arch
from medtex import data as D
from medtex import engine as E
from medtex import evaluation as V
from medtex import losses as L
from medtex import train as T

from conftest import central_gradcheck

# desk-scale protocol
SIZE = 64
TRAIN_COUNTS = (300, 300)
TEST_COUNTS = (120, 120)
DATA_SEED_TRAIN = 101
DATA_SEED_TEST = 202
TEACHER_SEED = 11
TEACHER_EPOCHS = 20
DISTILL_EPOCHS = 8
SEEDS = (5, 6, 7)

pytestmark = pytest.mark.slow


def _criterion(num, ok, detail):
    print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# shared desk-scale runs

@pytest.fixture(scope="module")
def desk_data():
    train = D.generate_dataset(*TRAIN_COUNTS, SIZE, seed=DATA_SEED_TRAIN, split="train")
    test = D.generate_dataset(*TEST_COUNTS, SIZE, seed=DATA_SEED_TEST, split="test")
    return train, test


@pytest.fixture(scope="module")
def desk_teacher(desk_data):
    train, test = desk_data
    cfg = T.TrainConfig(epochs=TEACHER_EPOCHS, seed=TEACHER_SEED, image_size=SIZE,
                        patience=10)
    ckpt = T.pretrain_teacher(train, cfg, test_set=test)
    acc = ckpt.extra["test_metrics"]["accuracy"]
    assert acc >= 0.95, f"teacher accuracy {acc:.3f} below the 0.95 gate"
    return ckpt


@pytest.fixture(scope="module")
def trend_runs(desk_data, desk_teacher):
    """All desk-scale distillation runs shared by criteria 5-7."""
    train, test = desk_data
    teacher = T.teacher_from_checkpoint(desk_teacher)
    results = {}
    for seed in SEEDS:
        for mode in ("med_tex", "med_ex", "student_only"):
            runs = [("1.0", train)]
            if mode == "med_tex":
                runs.append(("0.25", train.subset(0.25)))
            for frac_name, subset in runs:
                cfg = T.TrainConfig(epochs=DISTILL_EPOCHS, seed=seed, mode=mode,
                                    image_size=SIZE, patience=0)
                ck = T.distill(teacher, T.ImagesOnlyView(subset), cfg)
                pipe = T.StudentPipeline(T.bundle_from_checkpoint(ck))
                entry = {"f1": V.posthoc_metrics(pipe, teacher, test).f1}
                if pipe.explainer is not None:
                    entry["iou"] = V.iou_at_lesion_size(pipe, test, variant="standard")
                results[(mode, seed, frac_name)] = entry
                print(f"  run {mode} seed={seed} frac={frac_name}: {entry}", flush=True)
    results["random_iou"] = V.random_selection_baseline(
        test, seed=0, n_draws=20, variant="standard").lesion_size_iou
    return results


def _median(results, mode, key, frac="1.0"):
    return float(np.median([results[(mode, s, frac)][key] for s in SEEDS]))


# ---------------------------------------------------------------------------

def test_criterion_1_parameter_count_parity():
    teacher = arch.build_teacher((3, 256, 256), 2)
    student = arch.build_student((3, 256, 256), 2)
    tc = arch.count_parameters(teacher)
    sc = arch.count_parameters(student)
    ok = tc == 390466 and sc == 1726 and abs(tc / sc - 226.2) < 0.1
    _criterion(1, ok, f"teacher={tc} student={sc} ratio={tc / sc:.1f}")


def test_criterion_2_gradient_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0

    # output loss through the student's softmax
    z = E.parameter(rng.standard_normal((2, 2)))
    p = rng.dirichlet((1.0, 1.0), size=2)
    worst = max(worst, central_gradcheck(
        lambda: L.output_distill_loss(p, E.softmax(z)), {"z": z}, h=1e-4, tol=1e-3))

    # each intermediate loss on 2-channel 4x4 toy taps
    mus, variances, taps, teacher_taps = [], [], [], []
    for i in range(4):
        mu = arch.build_mu_subnetwork(i + 1, in_channels=2, mid_channels=3,
                                      out_channels=3, seed=i, dtype=np.float64)
        alpha = E.parameter(0.4 * rng.standard_normal(3))
        s = E.parameter(rng.random((2, 2, 4, 4)))
        t = rng.random((2, 3, 4, 4))
        params = {"alpha": alpha, "tap": s}
        params.update({f"mu{n}": p_ for n, p_ in mu.params.items()})
        var = L.LayerVariance(alpha, 1e-4)
        worst = max(worst, central_gradcheck(
            lambda t=t, s=s, mu=mu, var=var: L.intermediate_loss(t, s, mu, var),
            params, h=1e-4, tol=1e-3))
        mus.append(mu)
        variances.append(var)
        taps.append(s)
        teacher_taps.append(t)

    # total loss over all four layers plus the output term
    def total():
        l_out = L.output_distill_loss(p, E.softmax(z))
        l_int = [L.intermediate_loss(teacher_taps[i], taps[i], mus[i], variances[i])
                 for i in range(4)]
        return L.total_loss(l_out, l_int, 0.001)

    params = {"z": z}
    for i in range(4):
        params[f"tap{i}"] = taps[i]
        params[f"alpha{i}"] = variances[i].alpha
        params.update({f"mu{i}/{n}": p_ for n, p_ in mus[i].params.items()})
    worst = max(worst, central_gradcheck(total, params, h=1e-4, tol=1e-3))
    _criterion(2, worst <= 1e-3, f"worst relative error {worst:.2e} (tol 1e-3)")


def test_criterion_3_analytic_loss_anchors():
    ce = L.output_distill_loss(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])).item()
    ok_ce = abs(ce - np.log(2)) <= 1e-9

    channels = 2
    mu = arch.build_mu_subnetwork(1, in_channels=channels, mid_channels=channels,
                                  out_channels=channels, dtype=np.float64)
    eye = np.eye(channels)[:, :, None, None]
    for name, prm in mu.params.items():
        prm.data = eye.copy() if name.endswith(".w") else np.zeros_like(prm.data)
    eps = 1e-4
    alpha1 = float(np.log(np.expm1(1.0 - eps)))
    var1 = L.LayerVariance(E.parameter(np.full(channels, alpha1)), eps)
    t = np.abs(np.random.default_rng(1).random((3, channels, 4, 4)))
    zero = L.intermediate_loss(t, t, mu, var1).item()
    ok_zero = abs(zero) <= 1e-9

    # per-channel optimal variance vs. a zooming grid-search oracle
    rng = np.random.default_rng(2)
    t2 = rng.random((3, channels, 4, 4))
    s2 = rng.random((3, channels, 4, 4))
    mean_sq = ((t2 - s2) ** 2).mean(axis=(0, 2, 3))

    def loss_for(sigma2):
        alphas = np.log(np.expm1(np.maximum(sigma2 - eps, 1e-12)))
        var = L.LayerVariance(E.parameter(alphas), eps)
        return L.intermediate_loss(t2, s2, mu, var).item()

    worst_gap = 0.0
    for c in range(channels):
        lo, hi = 0.2 * mean_sq[c], 5.0 * mean_sq[c]
        for _zoom in range(3):
            grid = np.linspace(lo, hi, 1001)
            vals = []
            for g in grid:
                sigma2 = mean_sq.copy()
                sigma2[c] = g
                vals.append(loss_for(sigma2))
            j = int(np.argmin(vals))
            lo = grid[max(0, j - 2)]
            hi = grid[min(len(grid) - 1, j + 2)]
        best = grid[j]
        worst_gap = max(worst_gap, abs(best - mean_sq[c]) / mean_sq[c])
    ok_sigma = worst_gap <= 1e-6
    _criterion(3, ok_ce and ok_zero and ok_sigma,
               f"CE(u,u)-ln2={ce - np.log(2):.2e}; zero-residual loss={zero:.2e}; "
               f"sigma^2 argmin rel gap={worst_gap:.2e}")


def test_criterion_4_overfit_sanity(tmp_path):
    """med_tex on 8 images cuts total loss by >= 90% within 500 steps.

    Runs in 100-step chunks through checkpoint-resume so it can stop as
    soon as the reduction is reached.
    """
    ds = D.generate_dataset(4, 4, 32, seed=41)
    pre_cfg = T.TrainConfig(epochs=1000, seed=1, image_size=32, patience=0)
    teacher = T.teacher_from_checkpoint(
        T.pretrain_teacher(ds, pre_cfg, max_steps=120))
    cfg = T.TrainConfig(learning_rate=0.001, lam=0.001, epochs=500, seed=2,
                        mode="med_tex", image_size=32, patience=0)
    view = T.ImagesOnlyView(ds)
    ck = None
    losses = []
    for cap in range(100, 501, 100):
        ck = T.distill(teacher, view, cfg, out_dir=tmp_path, resume=ck, max_steps=cap)
        lines = (tmp_path / "metrics.tsv").read_text().strip().splitlines()
        losses = [float(l.split("\t")[6]) for l in lines]
        if losses[0] - min(losses) >= 0.9 * abs(losses[0]):
            break
    first = losses[0]
    drop = first - min(losses)
    ok = drop >= 0.9 * abs(first) and len(losses) <= 500
    _criterion(4, ok, f"loss {first:.3f} -> {min(losses):.3f} "
               f"(drop {drop:.3f} >= 0.9*|first|={0.9 * abs(first):.3f}) "
               f"within {len(losses)} steps")


def test_criterion_5_posthoc_trend(trend_runs):
    f1_tex = _median(trend_runs, "med_tex", "f1")
    f1_ex = _median(trend_runs, "med_ex", "f1")
    f1_so = _median(trend_runs, "student_only", "f1")
    ok = (f1_tex >= f1_ex - 0.02) and (f1_ex >= f1_so + 0.02)
    _criterion(5, ok, f"median F1: med_tex={f1_tex:.4f} med_ex={f1_ex:.4f} "
               f"student_only={f1_so:.4f}")


def test_criterion_6_iou_trend(trend_runs):
    iou_tex = _median(trend_runs, "med_tex", "iou")
    iou_ex = _median(trend_runs, "med_ex", "iou")
    rnd = trend_runs["random_iou"]
    ok = iou_tex >= 2.0 * iou_ex and iou_tex >= 3.0 * rnd
    _criterion(6, ok, f"median lesion-size IoU: med_tex={iou_tex:.4f} "
               f"med_ex={iou_ex:.4f} random={rnd:.4f}")


def test_criterion_7_data_fraction_trend(trend_runs):
    full = _median(trend_runs, "med_tex", "iou", frac="1.0")
    quarter = _median(trend_runs, "med_tex", "iou", frac="0.25")
    ok = full >= quarter - 0.02
    _criterion(7, ok, f"med_tex lesion-size IoU: frac1.0={full:.4f} "
               f"frac0.25={quarter:.4f}")


def test_criterion_8_metric_identities():
    rng = np.random.default_rng(8)
    exact = True
    for _ in range(1000):
        theta = rng.random((2, 4, 4))
        mask = (rng.random((4, 4)) < 0.3).astype(np.uint8)
        k = int(rng.integers(1, 33))
        if V.iou_topk(theta, mask, k, "paper_eq13") != 2.0 * V.iou_topk(
                theta, mask, k, "standard"):
            exact = False
            break

    test = D.generate_dataset(3, 3, 32, seed=88, split="test")

    def f(images):
        r = np.random.default_rng(0).random((len(images), 2))
        return r / r.sum(axis=1, keepdims=True)

    class _M:
        predict = staticmethod(f)

    rep = V.posthoc_metrics(_M(), _M(), test)
    ones = (rep.accuracy, rep.precision, rep.recall, rep.f1) == (1.0, 1.0, 1.0, 1.0)

    from medtex.explainer import topk_mask
    topk_ok = True
    for trial in range(200):
        r2 = np.random.default_rng(trial)
        theta = r2.permutation(32).reshape(2, 4, 4) / 32.0  # distinct values
        for k in range(1, 33):
            expect = set(np.argsort(-theta.reshape(-1), kind="stable")[:k])
            got = set(np.flatnonzero(topk_mask(theta, k).values.reshape(-1)))
            if got != expect:
                topk_ok = False
                break
        if not topk_ok:
            break
    _criterion(8, exact and ones and topk_ok,
               f"eq13=2x: {exact}; posthoc(f,f)=1: {ones}; topk oracle: {topk_ok}")


def test_criterion_9_invariant_suites(tmp_path):
    # theta range + exact rank-1 on emitted maps (the training loop asserts
    # this every 50 steps; a >50-step run passing is the evidence), plus the
    # frozen-teacher digest and bit-determinism of data and training
    ds = D.generate_dataset(4, 4, 32, seed=91)
    pre = T.TrainConfig(epochs=200, seed=1, image_size=32, patience=0)
    teacher_ck = T.pretrain_teacher(ds, pre, max_steps=60)
    teacher = T.teacher_from_checkpoint(teacher_ck)
    digest_before = T.parameter_digest(teacher)
    cfg = T.TrainConfig(epochs=60, seed=3, mode="med_tex", image_size=32, patience=0)
    view = T.ImagesOnlyView(ds)
    ck = T.distill(teacher, view, cfg, out_dir=tmp_path / "a", max_steps=55)
    frozen_ok = T.parameter_digest(teacher) == digest_before

    pipe = T.StudentPipeline(T.bundle_from_checkpoint(ck))
    theta_ok = True
    for s in ds.samples[:4]:
        m = pipe.selection_map(s.image)  # compose_selection re-validates range
        if not np.array_equal(m.values, m.channel_factor[:, None, None] * m.spatial_factor):
            theta_ok = False
        if m.values.min() < 0 or m.values.max() > 1:
            theta_ok = False

    gen_a = tmp_path / "gen_a"
    gen_b = tmp_path / "gen_b"
    D.save_dataset(D.generate_dataset(2, 2, 32, seed=9), gen_a)
    D.save_dataset(D.generate_dataset(2, 2, 32, seed=9), gen_b)
    gen_ok = all((gen_a / e.image_path).read_bytes() == (gen_b / e.image_path).read_bytes()
                 for e in D.load_dataset(gen_a).manifest.entries)
    gen_ok = gen_ok and (gen_a / "manifest").read_bytes() == (gen_b / "manifest").read_bytes()

    T.distill(teacher, view, cfg, out_dir=tmp_path / "b", max_steps=55)
    run_ok = ((tmp_path / "a" / "metrics.tsv").read_bytes()
              == (tmp_path / "b" / "metrics.tsv").read_bytes())
    _criterion(9, frozen_ok and theta_ok and gen_ok and run_ok,
               f"frozen teacher: {frozen_ok}; theta rank-1/range: {theta_ok}; "
               f"gen-data determinism: {gen_ok}; training determinism: {run_ok}")
