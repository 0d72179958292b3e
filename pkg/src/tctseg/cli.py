"""Command-line entry point: gen-data, train, eval, infer, gradcheck, report.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 failed
verification (gradient suite failure, non-finite training loss).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tctseg.errors import (
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    GenerationError,
    NonFiniteError,
    ShapeError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so dispatch owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _triple(text, kind=int, flag="value"):
    parts = [p for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise UsageError(f"{flag} expects Z,Y,X, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError:
        raise UsageError(f"{flag} expects numbers, got {text!r}") from None


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _optional_float(text):
    return None if str(text).lower() in ("none", "") else float(text)


def _radius(text):
    parts = str(text).split(",")
    try:
        lo, hi = (int(parts[0]), int(parts[-1]))
    except ValueError:
        raise UsageError(f"--radius expects MIN,MAX voxels, got {text!r}") from None
    if len(parts) > 2:
        raise UsageError(f"--radius expects MIN,MAX voxels, got {text!r}")
    return lo, hi


def _print_config(command, resolved, note=None):
    print(f"resolved config ({command}):")
    if note:
        print(f"  # {note}")
    print(json.dumps(resolved, indent=2, sort_keys=True, default=str))
    sys.stdout.flush()


# ------------------------------------------------------------------ gen-data

def cmd_gen_data(a):
    from tctseg.data import PhantomSpec, generate_phantom_dataset, parse_datasets_spec

    spec = PhantomSpec(
        size=_triple(a.size, int, "--size"),
        spacing=_triple(a.spacing, float, "--spacing"),
        num_classes=a.num_classes,
        radius_ranges=(_radius(a.radius),),
        noise_sigma=a.noise,
        datasets=parse_datasets_spec(a.datasets),
        test_count=a.test_count,
        seed=a.seed,
    )
    resolved = {
        "out": a.out,
        "seed": spec.seed,
        "num_classes": spec.num_classes,
        "size": list(spec.size),
        "spacing": list(spec.spacing),
        "radius": list(spec.radius_ranges[0]),
        "noise": spec.noise_sigma,
        "datasets": a.datasets,
        "test_count": spec.test_count,
    }
    _print_config("gen-data", resolved)
    manifest = generate_phantom_dataset(spec, a.out)
    n = sum(len(d.samples) for d in manifest.datasets) + len(manifest.test)
    print(f"wrote {n} samples to {a.out}")
    return EXIT_OK


# --------------------------------------------------------------------- train

_TRAIN_FLAG_TYPES = {
    "epochs": int,
    "batch_size": int,
    "patch_size": str,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "seed": int,
    "base_width": int,
    "method": str,
    "filter_strategy": str,
    "fixed_threshold": float,
    "binarize_level": float,
    "weighting": str,
    "w_max": float,
    "ramp_epochs": _optional_float,
    "exclude_self_merge": _bool,
    "foreground_prob": float,
    "init_checkpoint": str,
    "eval_every": int,
}


def _add_train_overrides(p):
    from tctseg.trainer import TrainConfig

    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        aliases = [flag]
        if f.name == "init_checkpoint":
            aliases.append("--init")
        p.add_argument(*aliases, dest=f"cfg_{f.name}", type=_TRAIN_FLAG_TYPES[f.name],
                       default=argparse.SUPPRESS, help=f"override TrainConfig.{f.name}")


def resolve_train_config(a):
    """Defaults, then --config file values, then flags (last wins)."""
    from tctseg.trainer import TrainConfig

    values = {}
    if a.config:
        path = Path(a.config)
        try:
            values = json.loads(path.read_text())
        except FileNotFoundError:
            raise FormatError(f"--config: no such file {path}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"--config: {path} is not valid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise FormatError(f"--config: {path} must hold a JSON object")
    for key, val in vars(a).items():
        if key.startswith("cfg_"):
            name = key[4:]
            if name == "patch_size":
                val = _triple(val, int, "--patch-size")
            values[name] = val
    if "patch_size" in values:
        values["patch_size"] = tuple(values["patch_size"])
    return TrainConfig.from_dict(values)


def cmd_train(a):
    from tctseg.data import load_manifest
    from tctseg.trainer import train_run

    cfg = resolve_train_config(a)
    manifest = load_manifest(a.data)
    resolved = {"data": a.data, "out": a.out, "resume": a.resume, "stop_epoch": a.stop_epoch}
    resolved.update(cfg.to_dict())
    _print_config("train", resolved, "precedence: defaults < --config file < flags")
    ckpt = train_run(cfg, manifest, a.out, resume=a.resume, stop_epoch=a.stop_epoch)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------- eval/infer

def _load_model(path):
    from tctseg.trainer import load_checkpoint, model_from_checkpoint

    return model_from_checkpoint(load_checkpoint(path))


def _write_report(path, manifest, samples, summary):
    n = manifest.num_classes
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "class", "dsc", "iou", "hd95"])
        for s, r in zip(samples, summary["reports"]):
            for c in range(n):
                hd = "" if not r.hd95_defined[c] else repr(float(r.hd95[c]))
                w.writerow([s.volume, c + 1, repr(float(r.dsc[c])), repr(float(r.iou[c])), hd])
        agg = summary["aggregate"]
        for c in range(n):
            hd = "" if np.isnan(agg["hd95"][c]) else repr(float(agg["hd95"][c]))
            w.writerow(["mean", c + 1, repr(float(agg["dsc"][c])), repr(float(agg["iou"][c])), hd])


def cmd_eval(a):
    from tctseg.data import load_labels, load_manifest
    from tctseg.trainer import evaluate

    manifest = load_manifest(a.data)
    if a.split == "test":
        samples = manifest.test or list(manifest.all_samples())
    else:
        samples = list(manifest.all_samples()) + list(manifest.test)
    resolved = {"ckpt": a.ckpt, "data": a.data, "report": a.report, "split": a.split,
                "ground_truth": a.ground_truth, "samples": len(samples)}
    if a.ground_truth:
        # the reference itself as prediction: exercises the scoring path
        refs = {s.volume: s for s in samples}
        it = iter(samples)

        def predict(_vol):
            s = next(it)
            return load_labels(manifest.path(refs[s.volume].full_labels)).data

        model, patch = predict, None
    else:
        if not a.ckpt:
            raise UsageError("eval: --ckpt is required unless --ground-truth is given")
        model, cfg = _load_model(a.ckpt)
        if model.config.num_classes != manifest.num_classes:
            raise ShapeError(
                f"--ckpt {a.ckpt} has {model.config.num_classes} classes, "
                f"--data {a.data} has {manifest.num_classes}"
            )
        patch = cfg.patch_size
        resolved["patch_size"] = list(patch)
    _print_config("eval", resolved)
    summary = evaluate(model, manifest, patch, samples)
    _write_report(a.report, manifest, samples, summary)
    agg = summary["aggregate"]
    for c in range(manifest.num_classes):
        print(f"class {c + 1}: DSC {agg['dsc'][c]:.4f}  IoU {agg['iou'][c]:.4f}  "
              f"HD95 {agg['hd95'][c]:.3f}  (undefined {agg['hd95_undefined'][c]})")
    print(f"mean DSC {float(np.mean(agg['dsc'])):.4f}; report: {a.report}")
    return EXIT_OK


def cmd_infer(a):
    from tctseg.data import LabelMap, load_volume, save_labels
    from tctseg.trainer import predict_labels

    model, cfg = _load_model(a.ckpt)
    vol = load_volume(a.volume)
    _print_config("infer", {"ckpt": a.ckpt, "volume": a.volume, "out": a.out,
                            "patch_size": list(cfg.patch_size),
                            "num_classes": model.config.num_classes})
    seg = predict_labels(model, vol.data, cfg.patch_size)
    save_labels(a.out, LabelMap(seg))
    counts = np.bincount(seg.reshape(-1), minlength=model.config.num_classes + 1)
    print("voxels per label: " + ", ".join(f"{k}:{int(v)}" for k, v in enumerate(counts)))
    return EXIT_OK


# ----------------------------------------------------------------- gradcheck

def cmd_gradcheck(a):
    from tctseg.gradsuite import run_suite

    _print_config("gradcheck", {"tol": a.tol, "seed": a.seed, "network": not a.skip_network,
                                "dtype": "float64"})
    results = run_suite(tol=a.tol, seed=a.seed, include_network=not a.skip_network)
    failed = 0
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:28s} max rel err {r.error:.3e}")
        failed += not r.ok
    print(f"{len(results) - failed}/{len(results)} checks within {a.tol:g}")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


# -------------------------------------------------------------------- report

def merge_logs(runs_dir):
    """Every ``log.csv`` below ``runs_dir`` as (run name, header, rows)."""
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise FormatError(f"--runs: {runs_dir} is not a directory")
    found = []
    for path in sorted(runs_dir.rglob("log.csv")):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:1] != ["epoch"]:
            raise FormatError(f"{path} is not a training log (missing epoch header)")
        name = str(path.parent.relative_to(runs_dir)) or "."
        found.append((name, rows[0], rows[1:]))
    if not found:
        raise FormatError(f"--runs: no log.csv found under {runs_dir}")
    return found


def _render_svg(merged, columns, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dsc_cols = [c for c in columns if c.startswith("dsc_class_")]
    panels = [("total", "total loss"), ("L_main", "L_main"), ("L_con", "L_con")]
    fig, axes = plt.subplots(1, len(panels) + 1, figsize=(4.2 * (len(panels) + 1), 3.4))
    for run, rows in merged.items():
        epochs = [int(r["epoch"]) for r in rows]
        for ax, (col, title) in zip(axes, panels):
            ax.plot(epochs, [float(r[col]) for r in rows], label=run)
            ax.set_title(title)
            ax.set_xlabel("epoch")
        pts = [(int(r["epoch"]), np.mean([float(r[c]) for c in dsc_cols]))
               for r in rows if dsc_cols and all(r.get(c) for c in dsc_cols)]
        if pts:
            axes[-1].plot(*zip(*pts), marker="o", label=run)
    axes[-1].set_title("mean DSC (eval epochs)")
    axes[-1].set_xlabel("epoch")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_report(a):
    _print_config("report", {"runs": a.runs, "out": a.out, "svg": a.svg})
    logs = merge_logs(a.runs)
    columns = []
    for _, header, _ in logs:
        for c in header:
            if c not in columns:
                columns.append(c)
    merged = {}
    out = Path(a.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + columns)
        for name, header, rows in logs:
            recs = [dict(zip(header, r)) for r in rows]
            merged[name] = recs
            for rec in recs:
                w.writerow([name] + [rec.get(c, "") for c in columns])
    print(f"merged {len(logs)} run(s) into {a.out}")
    if a.svg:
        _render_svg(merged, columns, a.svg)
        print(f"figure: {a.svg}")
    return EXIT_OK


# ------------------------------------------------------------------ dispatch

def build_parser():
    p = _Parser(prog="tctseg", description="Task consistency training on phantom volumes.",
                allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a partially labeled phantom benchmark",
                       allow_abbrev=False)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-classes", type=int, default=5)
    g.add_argument("--size", default="64,64,64", help="Z,Y,X")
    g.add_argument("--spacing", default="1,1,1", help="mm per voxel, Z,Y,X")
    g.add_argument("--datasets", required=True, help='e.g. "d1:1,2x20;d2:5x4"')
    g.add_argument("--test-count", type=int, default=0, help="fully labeled held-out volumes")
    g.add_argument("--radius", default="5,9", help="min,max semi-axis in voxels")
    g.add_argument("--noise", type=float, default=0.05)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run", allow_abbrev=False)
    t.add_argument("--config", help="JSON object with TrainConfig fields")
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="continue from a checkpoint of this run")
    t.add_argument("--stop-epoch", type=int, help="stop after this many epochs (resumable)")
    _add_train_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint against full labels", allow_abbrev=False)
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="per-sample CSV output")
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--ground-truth", action="store_true",
                   help="score the reference labels themselves (no checkpoint)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one volume", allow_abbrev=False)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--volume", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite", allow_abbrev=False)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--skip-network", action="store_true", help="primitives and losses only")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="merge run logs into CSV (and SVG)", allow_abbrev=False)
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--svg")
    r.set_defaults(func=cmd_report)
    return p


def dispatch(argv=None):
    """Run one command; returns the exit code."""
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if a.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return a.func(a)
    except (UsageError, ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IsADirectoryError, ShapeError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


def main():
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
