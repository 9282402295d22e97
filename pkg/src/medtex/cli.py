"""Command-line entry point.

Subcommands: ``gen-data``, ``pretrain``, ``distill``, ``eval``, ``explain``.
Every run resolves its configuration from (highest precedence first) command
flags, a ``key = value`` config file with ``[section]`` headers, built-in
defaults, and the MEDTEX_SEED environment variable for the seed; the merged
result is written to ``<out>/config.resolved`` so a run directory is
self-describing.

Exit codes: 0 success, 1 training divergence or internal failure, 2 usage
and validation errors, 3 file-format errors.  Errors print as
``module.op: message`` on stderr.
"""

import argparse
import configparser
import os
import sys
from pathlib import Path

FORMAT_VERSION = 1

_COMMON_TRAIN_KEYS = {
    "learning_rate": (float, 0.001),
    "batch_size": (int, 16),
    "lam": (float, 0.001),
    "epochs": (int, 30),
    "epsilon": (float, 1e-4),
    "patience": (int, 10),
    "min_delta": (float, 1e-4),
    "max_steps": (int, 0),
}


def _parse_config_file(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = cp.read(path)
    if not read:
        from .errors import FormatError
        raise FormatError("cli", "config", f"cannot read config file {path}")
    out = {}
    for section in cp.sections():
        for key, val in cp.items(section):
            out[key.replace("-", "_")] = val
    return out


def _resolve(args, keys):
    """flags > config file > defaults > MEDTEX_SEED (seed only)."""
    from .errors import ValidationError
    file_cfg = _parse_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, (typ, default) in keys.items():
        val = getattr(args, key, None)
        if val is None and key in file_cfg:
            try:
                raw = file_cfg[key]
                val = (raw.lower() in ("1", "true", "yes")) if typ is bool else typ(raw)
            except ValueError as exc:
                raise ValidationError("cli", "config",
                                      f"bad value for {key!r} in config file: {exc}")
        if val is None and key == "seed":
            env = os.environ.get("MEDTEX_SEED")
            if env is not None:
                try:
                    val = int(env)
                except ValueError as exc:
                    raise ValidationError("cli", "config",
                                          f"MEDTEX_SEED must be an integer: {exc}")
        if val is None:
            val = default
        resolved[key] = val
    return resolved


def _write_resolved(out_dir, command, resolved):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["[run]", f"format_version = {FORMAT_VERSION}", f"command = {command}", ""]
    lines.append(f"[{command.replace('-', '_')}]")
    for key in sorted(resolved):
        lines.append(f"{key} = {resolved[key]}")
    (out / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    from .data import generate_dataset, save_dataset
    keys = {
        "n_normal": (int, 100), "n_abnormal": (int, 100),
        "size": (int, 64), "seed": (int, 0), "split": (str, "train"),
    }
    cfg = _resolve(args, keys)
    _write_resolved(args.out, "gen-data", cfg)
    ds = generate_dataset(cfg["n_normal"], cfg["n_abnormal"], cfg["size"],
                          cfg["seed"], split=cfg["split"])
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _train_config(cfg, mode="med_tex"):
    from .train import TrainConfig
    return TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                       lam=cfg["lam"], epochs=cfg["epochs"], seed=cfg["seed"],
                       mode=mode, epsilon=cfg["epsilon"], image_size=cfg["image_size"],
                       num_classes=2, patience=cfg["patience"],
                       min_delta=cfg["min_delta"])


def cmd_pretrain(args):
    from .data import load_dataset
    from .train import pretrain_teacher
    keys = dict(_COMMON_TRAIN_KEYS)
    keys["seed"] = (int, 0)
    cfg = _resolve(args, keys)
    train_set = load_dataset(args.data)
    cfg["image_size"] = train_set.manifest.image_size
    _write_resolved(args.out, "pretrain", cfg)
    test_set = load_dataset(args.test_data) if args.test_data else None
    config = _train_config(cfg)
    ckpt = pretrain_teacher(train_set, config, test_set=test_set, out_dir=args.out,
                            max_steps=cfg["max_steps"])
    if "test_metrics" in ckpt.extra:
        for k, v in ckpt.extra["test_metrics"].items():
            print(f"test_{k} = {v:.4f}")
    print(f"teacher checkpoint: {Path(args.out) / 'teacher.ckpt'}")
    return 0


def cmd_distill(args):
    from .data import load_dataset
    from .train import ImagesOnlyView, distill, load_checkpoint
    keys = dict(_COMMON_TRAIN_KEYS)
    keys.update({"seed": (int, 0), "fraction": (float, 1.0)})
    cfg = _resolve(args, keys)
    data = load_dataset(args.data).subset(cfg["fraction"])
    cfg["image_size"] = data.manifest.image_size
    cfg["mode"] = args.mode
    _write_resolved(args.out, "distill", cfg)
    ids = "\n".join(str(i) for i in data.manifest.sample_ids)
    (Path(args.out) / "train_subset_ids.txt").write_text(ids + "\n", encoding="utf-8")
    teacher = load_checkpoint(args.teacher, expect_kind="teacher")
    config = _train_config(cfg, mode=args.mode)
    ckpt = distill(teacher, ImagesOnlyView(data), config, out_dir=args.out,
                   max_steps=cfg["max_steps"])
    if "final_loss" in ckpt.extra:
        print(f"final total loss = {ckpt.extra['final_loss']['total']:.6f}")
    print(f"distill checkpoint: {Path(args.out) / 'distill.ckpt'}")
    return 0


def _loss_summary_lines(ckpt):
    fl = ckpt.extra.get("final_loss")
    lines = []
    if fl is None:
        return ["training_l_output = n/a", "training_total = n/a"]
    lines.append(f"training_l_output = {fl['l_output']:.6f}")
    for i in range(4):
        if fl["l_intermediate"]:
            lines.append(f"training_l_i{i + 1} = {fl['l_intermediate'][i]:.6f}")
        else:
            lines.append(f"training_l_i{i + 1} = n/a")
    lines.append(f"training_total = {fl['total']:.6f}")
    return lines


def cmd_eval(args):
    from .data import load_dataset
    from .evaluation import (iou_at_lesion_size, iou_curve, posthoc_metrics,
                             random_selection_baseline)
    from .train import (StudentPipeline, bundle_from_checkpoint, load_checkpoint,
                        teacher_from_checkpoint)
    keys = {"seed": (int, 0), "iou_variant": (str, "standard"),
            "baseline_draws": (int, 20)}
    cfg = _resolve(args, keys)
    _write_resolved(args.out, "eval", cfg)
    out = Path(args.out)
    test_set = load_dataset(args.data)
    teacher = teacher_from_checkpoint(load_checkpoint(args.teacher, expect_kind="teacher"))
    ckpt = load_checkpoint(args.checkpoint, expect_kind="distill")
    pipeline = StudentPipeline(bundle_from_checkpoint(ckpt))

    posthoc = posthoc_metrics(pipeline, teacher, test_set)
    (out / "posthoc.txt").write_text(posthoc.to_kv(), encoding="utf-8")
    summary = [f"mode = {ckpt.config.mode}", f"iou_variant = {cfg['iou_variant']}"]
    summary += [l for l in posthoc.to_kv().strip().splitlines()]
    summary += _loss_summary_lines(ckpt)

    if pipeline.explainer is not None:
        curve = iou_curve(pipeline, test_set, variant=cfg["iou_variant"])
        curve.lesion_size_iou = iou_at_lesion_size(pipeline, test_set,
                                                   variant=cfg["iou_variant"])
        (out / "iou.txt").write_text(curve.to_kv(), encoding="utf-8")
        summary += [l for l in curve.to_kv().strip().splitlines() if "=" in l]
    else:
        (out / "iou.txt").write_text("variant = n/a\n", encoding="utf-8")
        summary.append("iou = n/a")

    baseline = random_selection_baseline(test_set, seed=cfg["seed"],
                                         n_draws=cfg["baseline_draws"],
                                         variant=cfg["iou_variant"])
    (out / "random_baseline.txt").write_text(baseline.to_kv(), encoding="utf-8")
    summary += [f"random_{l}" for l in baseline.to_kv().strip().splitlines() if "=" in l]
    (out / "summary.kv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print((out / "summary.kv").read_text(encoding="utf-8").strip())
    return 0


def cmd_explain(args):
    from .data import load_dataset
    from .evaluation import export_heatmap
    from .train import StudentPipeline, bundle_from_checkpoint, load_checkpoint
    keys = {"seed": (int, 0), "limit": (int, 8)}
    cfg = _resolve(args, keys)
    _write_resolved(args.out, "explain", cfg)
    out = Path(args.out)
    test_set = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint, expect_kind="distill")
    pipeline = StudentPipeline(bundle_from_checkpoint(ckpt))
    if pipeline.explainer is None:
        from .errors import ValidationError
        raise ValidationError("cli", "explain", "student_only checkpoints have no explainer")
    wrote = 0
    for s in test_set.samples:
        if s.label != 1:
            continue
        sel = pipeline.selection_map(s.image)
        export_heatmap(sel, s.image, out / f"sample_{s.sample_id:06d}")
        wrote += 1
        if wrote >= cfg["limit"]:
            break
    print(f"wrote {wrote} heatmap pairs to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="medtex",
                                description="Distill a frozen teacher classifier into a "
                                            "small student with a pixel-level explainer.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic lesion dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-normal", type=int, dest="n_normal")
    g.add_argument("--n-abnormal", type=int, dest="n_abnormal")
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", choices=("train", "test"))
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen_data)

    def add_train_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--learning-rate", type=float, dest="learning_rate")
        sp.add_argument("--batch-size", type=int, dest="batch_size")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lam", type=float)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--min-delta", type=float, dest="min_delta")
        sp.add_argument("--max-steps", type=int, dest="max_steps")

    t = sub.add_parser("pretrain", help="train the teacher on ground-truth labels")
    t.add_argument("--data", required=True)
    t.add_argument("--test-data", dest="test_data")
    t.add_argument("--out", required=True)
    add_train_flags(t)
    t.set_defaults(fn=cmd_pretrain)

    d = sub.add_parser("distill", help="distill the frozen teacher (images only)")
    d.add_argument("--data", required=True)
    d.add_argument("--teacher", required=True)
    d.add_argument("--mode", choices=("med_tex", "med_ex", "student_only"),
                   default="med_tex")
    d.add_argument("--fraction", type=float, choices=(0.25, 0.5, 1.0))
    d.add_argument("--out", required=True)
    add_train_flags(d)
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("eval", help="post-hoc fidelity and IoU reports")
    e.add_argument("--data", required=True)
    e.add_argument("--teacher", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--iou-variant", choices=("standard", "paper_eq13"),
                   dest="iou_variant")
    e.add_argument("--baseline-draws", type=int, dest="baseline_draws")
    e.add_argument("--seed", type=int)
    e.add_argument("--config")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("explain", help="export selection heatmaps for abnormal images")
    x.add_argument("--data", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--limit", type=int)
    x.add_argument("--seed", type=int)
    x.add_argument("--config")
    x.set_defaults(fn=cmd_explain)
    return p


def main(argv=None):
    from .errors import DivergenceError, FormatError, MedtexError, ValidationError
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except FormatError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except MedtexError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
