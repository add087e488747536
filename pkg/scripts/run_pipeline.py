"""Run the whole pipeline for one config and print the headline numbers.

    python scripts/run_pipeline.py scripts/configs/desk.json
    python scripts/run_pipeline.py scripts/configs/desk.json --skip generate train
"""
import argparse
import csv
import json
import sys
import time

from lrprec.cli import main
from lrprec.config import load_config

STAGES = ("generate", "ingest", "train", "eval", "explain", "perturb", "recommend")


def run():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--skip", nargs="*", default=[], choices=STAGES)
    args = ap.parse_args()
    cfg = load_config(args.config)
    for stage in STAGES:
        if stage in args.skip:
            continue
        t0 = time.perf_counter()
        extra = ["--n", "3"] if stage == "explain" else []
        if main([stage, "--config", args.config, *extra]) != 0:
            sys.exit(f"{stage} failed")
        print(f"{stage:>9}: {time.perf_counter() - t0:6.1f}s")

    out = cfg.out_dir
    print("\naccuracy (%)")
    for row in csv.DictReader((out / "accuracy_report.csv").open()):
        print(f"  {row['category']:<12} {row['relation_type']:<18} D={row['D']:<4} {float(row['accuracy']):6.2f}")
    summary = json.loads((out / "perturb_summary.json").read_text())
    print("\nperturbation AUC (lower = steeper decline)")
    for name, auc in summary["auc"].items():
        print(f"  {name:<16} {auc:6.2f}")
    for name, t in summary.get("tests", {}).items():
        print(f"  lrp {name} vs random: p = {t['p_value']:.2e}")


if __name__ == "__main__":
    run()
