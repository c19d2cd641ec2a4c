"""Command-line entry points: generate-data, train, evaluate, compare, export-curves."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, trainer
from .errors import ConfigurationError, SemiSegError

log = logging.getLogger("semiseg3d")


class CompareError(SemiSegError):
    pass


# -- generate-data -------------------------------------------------------------

def cmd_generate_data(args):
    out = Path(args.output)
    manifest = data.write_cohort(out, args.subjects, shape=args.shape, seed=args.seed, n_test=args.test,
                                 noise_sigma=args.noise_sigma, bias_strength=args.bias_strength,
                                 deformation_strength=args.deformation)
    print(f"wrote {len(manifest['subjects'])} subjects to {out} ({manifest['cohort_id']})")


# -- train ---------------------------------------------------------------------

_TRAIN_FLAGS = {
    "mode": "mode", "labeled": "n_labeled", "seed": "seed", "epochs": "epochs", "batch_size": "batch_size",
    "lr": "lr", "lambda_ent": "lambda_ent", "base_width": "base_width", "noise_dim": "noise_dim",
    "patience": "patience", "max_steps": "max_steps", "threads": "threads",
}


def build_config(args) -> trainer.TrainConfig:
    """Defaults of the preset, overridden by ``--config`` JSON, overridden by flags."""
    params = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        params.update(trainer.TrainConfig.from_dict(raw).to_dict())
        params.pop("schema_version")
    for flag, name in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            params[name] = value
    if args.config:
        return trainer.TrainConfig(**params)
    if args.preset == "desk":
        return trainer.TrainConfig.desk(**params)
    return trainer.TrainConfig(**params)


def run_dir_for(args, cfg):
    if args.output:
        return Path(args.output)
    return data.default_output_root() / f"{cfg.mode}-l{cfg.n_labeled}-s{cfg.seed}"


def cmd_train(args):
    cfg = build_config(args)
    cohort = data.Cohort(args.cohort)
    out = run_dir_for(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))

    def progress(epoch, rec):
        log.info("epoch %d step %d L_labeled %.4f val_err %.4f", epoch, rec["step"], rec["L_labeled"],
                 rec["validation_error"])

    result = trainer.fit(cfg, cohort, progress=progress)
    extra = {"cohort_id": cohort.cohort_id, "cohort": str(Path(args.cohort).resolve())}
    result.save_checkpoint(out / "checkpoint.npz", extra)
    trainer.write_log(result.log, out / "trainlog.csv", out / "summary.json", {
        "mode": cfg.mode, "n_labeled": cfg.n_labeled, "seed": cfg.seed, "best_epoch": result.best_epoch,
        "best_validation_error": result.best_validation_error, "splits": result.splits.to_dict(), **extra,
    })
    print(f"trained {cfg.mode} ({len(result.log.records)} steps); artifacts in {out}")


# -- evaluate ------------------------------------------------------------------

def evaluate_run(checkpoint, cohort, subjects, predictions_dir=None, patch_side=32, stride=8):
    """Per-subject metric reports for ``subjects``; predictions from the model unless a directory is given."""
    from .models import load_checkpoint
    from .trainer import predict_volume

    model = None
    if predictions_dir is None:
        modules, _ = load_checkpoint(checkpoint)
        model = modules["discriminator"]
    reports = {}
    for sid in subjects:
        volume, ref = cohort.load(sid)
        if model is not None:
            _, pred = predict_volume(model, volume, patch_side, stride)
        else:
            _, pred_map = data.load_subject(Path(predictions_dir) / sid)
            pred = pred_map.labels
        reports[sid] = metrics.report(pred, ref, volume.spacing, ref.num_classes, ref.class_names)
    return reports


def aggregate(reports):
    """Mean over subjects of every per-class metric and of the macro averages."""
    first = next(iter(reports.values()))
    out = {"n_subjects": len(reports), "per_class": {}, "macro": {}}
    for name in first.per_class:
        entry = {}
        for key in ("dsc", "asd_mm", "vs"):
            vals = [getattr(r.per_class[name], key) for r in reports.values()]
            vals = [v for v in vals if v is not None]
            entry[key] = float(np.mean(vals)) if vals else None
        out["per_class"][name] = entry
    for key in ("dsc", "asd_mm", "vs"):
        vals = [r.macro[key] for r in reports.values() if r.macro[key] is not None]
        out["macro"][key] = float(np.mean(vals)) if vals else None
    return out


def cmd_evaluate(args):
    run = Path(args.run) if args.run else Path(args.checkpoint).parent
    checkpoint = Path(args.checkpoint) if args.checkpoint else run / "checkpoint.npz"
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    from .models import load_checkpoint

    _, meta = load_checkpoint(checkpoint)
    extra = meta["extra"]
    cohort = data.Cohort(args.cohort or extra["cohort"])
    splits = extra["splits"]
    key = {"test": "test", "validation": "validation", "labeled": "labeled_train"}[args.split]
    subjects = args.subjects.split(",") if args.subjects else splits[key]
    if not subjects:
        raise ConfigurationError(f"split {args.split!r} is empty; nothing to evaluate")
    cfg = extra["config"]
    reports = evaluate_run(checkpoint, cohort, subjects, args.predictions, cfg["patch_side"], cfg["stride"])
    out = Path(args.output) if args.output else run
    out.mkdir(parents=True, exist_ok=True)
    rows = [row for sid, rep in reports.items() for row in rep.rows(sid)]
    with open(out / f"metrics_{args.split}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["subject", "class", "dsc", "asd_mm", "vs"])
        writer.writeheader()
        writer.writerows(rows)
    summary = {
        "split": args.split,
        "cohort_id": cohort.cohort_id,
        "mode": cfg["mode"], "n_labeled": cfg["n_labeled"], "seed": cfg["seed"],
        "mean": aggregate(reports),
        "subjects": {sid: rep.to_dict() for sid, rep in reports.items()},
    }
    (out / f"metrics_{args.split}.json").write_text(json.dumps(summary, indent=2))
    print(f"{args.split}: mean macro DSC {summary['mean']['macro']['dsc']:.4f} over {len(reports)} subjects")


# -- compare -------------------------------------------------------------------

def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), (float(statistics.stdev(vals)) if len(vals) > 1 else 0.0)


def compare_runs(run_dirs, split="test"):
    """Rows of mean/std metrics per (mode, n_labeled), averaged over seeds."""
    missing = [str(Path(r) / f"metrics_{split}.json") for r in run_dirs if not (Path(r) / f"metrics_{split}.json").exists()]
    if missing:
        raise CompareError("missing run artifacts:\n  " + "\n  ".join(missing))
    results = [json.loads((Path(r) / f"metrics_{split}.json").read_text()) for r in run_dirs]
    cohorts = {r["cohort_id"] for r in results}
    if len(cohorts) > 1:
        raise CompareError(f"runs come from different cohorts: {sorted(cohorts)}")
    groups = {}
    for res in results:
        groups.setdefault((res["mode"], res["n_labeled"]), []).append(res)
    class_names = list(results[0]["mean"]["per_class"])
    rows = []
    order = {m: i for i, m in enumerate(trainer.MODES)}
    for (mode, n_lab), runs in sorted(groups.items(), key=lambda kv: (kv[0][1], order.get(kv[0][0], 99))):
        row = {"mode": mode, "n_labeled": n_lab, "n_seeds": len(runs), "seeds": sorted(r["seed"] for r in runs)}
        for name in class_names:
            for key in ("dsc", "asd_mm", "vs"):
                mean, std = _mean_std([r["mean"]["per_class"][name][key] for r in runs])
                row[f"{name}_{key}"], row[f"{name}_{key}_std"] = mean, std
        for key in ("dsc", "asd_mm", "vs"):
            mean, std = _mean_std([r["mean"]["macro"][key] for r in runs])
            row[f"macro_{key}"], row[f"macro_{key}_std"] = mean, std
        rows.append(row)
    return rows, class_names


def _fmt(mean, std):
    if mean is None:
        return "n/a"
    return f"{mean:.3f} ± {std:.3f}"


def comparison_markdown(rows, class_names):
    head = ["Method", "Labeled"] + [f"{n.upper()} DSC" for n in class_names] + \
           [f"{n.upper()} ASD (mm)" for n in class_names] + ["Macro DSC", "Macro VS", "Seeds"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r["mode"], str(r["n_labeled"])]
        cells += [_fmt(r[f"{n}_dsc"], r[f"{n}_dsc_std"]) for n in class_names]
        cells += [_fmt(r[f"{n}_asd_mm"], r[f"{n}_asd_mm_std"]) for n in class_names]
        cells += [_fmt(r["macro_dsc"], r["macro_dsc_std"]), _fmt(r["macro_vs"], r["macro_vs_std"]),
                  ",".join(map(str, r["seeds"]))]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_compare(args):
    if len(args.runs) < 2:
        raise ConfigurationError("compare needs at least two runs")
    rows, class_names = compare_runs(args.runs, args.split)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (",".join(map(str, v)) if isinstance(v, list) else v) for k, v in r.items()})
    md = comparison_markdown(rows, class_names)
    (out / "comparison.md").write_text(md)
    print(md, end="")


# -- export-curves -------------------------------------------------------------

def cmd_export_curves(args):
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    missing = [str(Path(r) / "trainlog.csv") for r in args.runs if not (Path(r) / "trainlog.csv").exists()]
    if missing:
        raise CompareError("missing run artifacts:\n  " + "\n  ".join(missing))
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "mode", "seed"] + list(trainer.LOG_COLUMNS))
        for run in args.runs:
            cfg = json.loads((Path(run) / "config.json").read_text())
            for rec in trainer.TrainLog.from_csv(Path(run) / "trainlog.csv").records:
                writer.writerow([Path(run).name, cfg["mode"], cfg["seed"]] + [rec[c] for c in trainer.LOG_COLUMNS])
    print(f"wrote curves for {len(args.runs)} runs to {out}")


# -- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="semiseg3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic phantom cohort")
    g.add_argument("--subjects", type=int, default=12)
    g.add_argument("--shape", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test", type=int, default=4, help="size of the fixed test split")
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--bias-strength", type=float, default=0.2)
    g.add_argument("--deformation", type=float, default=0.15)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--cohort", required=True)
    t.add_argument("--mode", choices=trainer.MODES)
    t.add_argument("--labeled", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="JSON TrainConfig file (overridden by flags)")
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda-ent", type=float)
    t.add_argument("--base-width", type=int)
    t.add_argument("--noise-dim", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("-o", "--output", help="run directory (default $SEMISEG3D_OUTPUT_ROOT/<mode>-l<n>-s<seed>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="DSC/ASD/VS of a trained run")
    e.add_argument("--run", help="run directory holding checkpoint.npz")
    e.add_argument("--checkpoint")
    e.add_argument("--cohort", help="cohort directory (default: the one recorded in the checkpoint)")
    e.add_argument("--split", choices=("test", "validation", "labeled"), default="test")
    e.add_argument("--subjects", help="comma-separated subject ids overriding the split")
    e.add_argument("--predictions", help="directory of <subject>/labels.f32 label maps to score instead")
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="table of evaluated runs grouped by mode and label count")
    c.add_argument("runs", nargs="+")
    c.add_argument("--split", default="test")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("export-curves", help="concatenate training logs into one CSV")
    x.add_argument("runs", nargs="+")
    x.add_argument("-o", "--output", required=True)
    x.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and not (args.run or args.checkpoint):
        parser.error("evaluate needs --run or --checkpoint")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (SemiSegError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
