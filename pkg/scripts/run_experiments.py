#!/usr/bin/env python3
"""Run every experiment preset on a shared synthetic dataset and print a
validation-metrics summary table (the desk-scale analog of the original
study's figure).

Usage, from the repo root:

    python scripts/run_experiments.py [--quick]

Artifacts land in runs/: one directory per preset plus runs/summary.csv.
--quick shrinks the schedule to smoke-test the wiring.
"""

import argparse
import csv
import io
import sys
from contextlib import redirect_stdout
from pathlib import Path

from vesselseg.cli import main as cli_main

REPO = Path(__file__).resolve().parent.parent
PRESETS = ["baseline-unet", "encoder-init", "dice", "focal", "deeper-encoder", "fpn"]


def run(argv):
    code = cli_main([str(a) for a in argv])
    if code != 0:
        sys.exit(f"command {argv[0]} failed with exit code {code}")


def eval_mean(checkpoint, data_dir, split="val"):
    buf = io.StringIO()
    with redirect_stdout(buf):
        run(["eval", checkpoint, data_dir, "--split", split])
    mean = buf.getvalue().strip().splitlines()[-1].split(",")
    assert mean[0] == "__mean__"
    return float(mean[1]), float(mean[2])


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true",
                        help="4 epochs per preset instead of the full schedule")
    args = parser.parse_args()

    runs = Path("runs")
    if not (runs / "data" / "index.csv").is_file():
        run(["synth", runs / "data", "--seed", 0, "--count", 16, "--size", 64,
             "--val-fraction", "0.25"])

    rows = []
    for name in PRESETS:
        preset = REPO / "presets" / f"{name}.cfg"
        cfg_path = preset
        if args.quick:
            text = preset.read_text().replace("train.epochs=60", "train.epochs=4")
            cfg_path = runs / f"{name}.quick.cfg"
            cfg_path.parent.mkdir(parents=True, exist_ok=True)
            cfg_path.write_text(text)
        print(f"=== {name}")
        run(["train", cfg_path])
        epochs = 4 if args.quick else 60
        ckpt = runs / name / f"ckpt_epoch{epochs - 1:03d}.bin"
        val_iou, val_dice = eval_mean(ckpt, runs / "data", "val")
        rows.append((name, val_iou, val_dice))

    print("\nValidation metrics by experiment preset (synthetic dataset):")
    print(f"{'preset':<16} {'val_iou':>8} {'val_dice':>9}")
    for name, i, d in rows:
        print(f"{name:<16} {i:>8.4f} {d:>9.4f}")
    with open(runs / "summary.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["preset", "val_iou", "val_dice"])
        writer.writerows(rows)
    print(f"\nsummary written to {runs / 'summary.csv'}")


if __name__ == "__main__":
    main()
