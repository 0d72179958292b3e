"""Desk-scale directional experiment: TAL vs TCT on a phantom benchmark with one scarce class.

Each (arm, seed) run is cached as ``<out>/runs/<arm>_s<seed>/result.json`` so an
interrupted sweep picks up where it stopped.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from tctseg.data import PhantomSpec, generate_phantom_dataset, load_manifest, parse_datasets_spec
from tctseg.trainer import Trainer, TrainConfig

log = logging.getLogger(__name__)

DATASETS = "d1:1x20;d2:2x20;d3:3x20;d4:4x20;d5:5x4"
SCARCE_CLASS = 5
TEST_COUNT = 10
SEEDS = (0, 1, 2)
TIE = 0.005
MARGIN = 0.02

ARMS = {
    "tal": dict(method="tal", weighting="fixed", filter_strategy="none", w_max=0.0),
    "tct_plain": dict(method="tct", weighting="fixed", filter_strategy="none", w_max=0.1),
    "tct_full": dict(method="tct", weighting="uauwl", filter_strategy="task_median", w_max=0.1),
}


def ensure_data(root, seed=0):
    root = Path(root)
    if (root / "manifest.json").exists():
        return load_manifest(root)
    spec = PhantomSpec(
        size=(64, 64, 64),
        num_classes=5,
        datasets=parse_datasets_spec(DATASETS),
        test_count=TEST_COUNT,
        seed=seed,
    )
    return generate_phantom_dataset(spec, root)


def run_arm(manifest, arm, seed, out_dir, epochs=40, base_width=8):
    out_dir = Path(out_dir)
    res_path = out_dir / "result.json"
    if res_path.exists():
        return json.loads(res_path.read_text())
    cfg = TrainConfig(epochs=epochs, seed=seed, base_width=base_width, **ARMS[arm])
    t0 = time.process_time()
    w0 = time.perf_counter()
    trainer = Trainer(cfg, manifest, out_dir)
    trainer.run()
    summary = trainer.last_eval
    agg = summary["aggregate"]
    result = {
        "arm": arm,
        "seed": seed,
        "config": cfg.to_dict(),
        "dsc": [float(v) for v in agg["dsc"]],
        "iou": [float(v) for v in agg["iou"]],
        "hd95": [None if np.isnan(v) else float(v) for v in agg["hd95"]],
        "hd95_undefined": [int(v) for v in agg["hd95_undefined"]],
        "cpu_seconds": time.process_time() - t0,
        "wall_seconds": time.perf_counter() - w0,
    }
    res_path.write_text(json.dumps(result, indent=2))
    return result


def summarize(results):
    """Per-arm means over seeds and the directional verdicts."""
    arms = {}
    for r in results:
        arms.setdefault(r["arm"], []).append(r)
    means = {}
    for arm, rs in arms.items():
        dsc = np.array([r["dsc"] for r in rs])
        means[arm] = {
            "seeds": [r["seed"] for r in rs],
            "dsc_per_class": dsc.mean(axis=0).tolist(),
            "dsc_mean": float(dsc.mean()),
            "scarce_dsc": float(dsc[:, SCARCE_CLASS - 1].mean()),
            "cpu_seconds": float(sum(r["cpu_seconds"] for r in rs)),
        }
    out = {"arms": means}
    if {"tal", "tct_full", "tct_plain"} <= set(means):
        full, plain, tal = means["tct_full"], means["tct_plain"], means["tal"]
        out["scarce_gain"] = full["scarce_dsc"] - tal["scarce_dsc"]
        out["scarce_ok"] = out["scarce_gain"] >= MARGIN
        out["order_ok"] = (
            full["dsc_mean"] >= plain["dsc_mean"] - TIE and plain["dsc_mean"] >= tal["dsc_mean"] - TIE
        )
        out["cpu_seconds"] = sum(m["cpu_seconds"] for m in means.values())
        out["budget_ok"] = out["cpu_seconds"] <= 2 * 3600
    return out


def run_benchmark(out, seeds=SEEDS, arms=tuple(ARMS), epochs=40, base_width=8):
    out = Path(out)
    t0 = time.process_time()
    manifest = ensure_data(out / "data")
    gen_cpu = time.process_time() - t0
    results = []
    for seed in seeds:
        for arm in arms:
            r = run_arm(manifest, arm, seed, out / "runs" / f"{arm}_s{seed}", epochs, base_width)
            log.info("%s seed %d: mean DSC %.4f, scarce %.4f, %.0fs cpu",
                     arm, seed, np.mean(r["dsc"]), r["dsc"][SCARCE_CLASS - 1], r["cpu_seconds"])
            results.append(r)
    summary = summarize(results)
    summary["generation_cpu_seconds"] = gen_cpu
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main(argv=None):
    p = argparse.ArgumentParser(prog="tctseg-benchmark", description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--arms", default=",".join(ARMS))
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--base-width", type=int, default=8)
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    summary = run_benchmark(
        a.out,
        tuple(int(s) for s in a.seeds.split(",")),
        tuple(a.arms.split(",")),
        a.epochs,
        a.base_width,
    )
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
