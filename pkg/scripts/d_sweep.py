"""Train and evaluate every relation type for several metric ranks D and
print the report in a category x type grid, one block per D.

    python scripts/d_sweep.py scripts/configs/desk.json --D 10 100
"""
import argparse
import csv
import json
from pathlib import Path

from lrprec.cli import main
from lrprec.config import load_config


def run():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--D", type=int, nargs="+", default=[10, 100])
    args = ap.parse_args()
    src = Path(args.config)
    raw = json.loads(src.read_text())
    raw["D"] = args.D
    sweep = src.with_name(src.stem + ".sweep.json")
    sweep.write_text(json.dumps(raw, indent=1))
    cfg = load_config(sweep)
    if not cfg.manifest_path.exists():
        main(["generate", "--config", str(sweep)])
    for cmd in ("train", "eval"):
        if main([cmd, "--config", str(sweep)]) != 0:
            raise SystemExit(f"{cmd} failed")
    rows = list(csv.DictReader((cfg.out_dir / "accuracy_report.csv").open()))
    types = cfg.relation_types
    for D in args.D:
        print(f"\nD = {D}")
        print(f"{'category':<12}" + "".join(f"{t:>19}" for t in types))
        for cat in sorted({r["category"] for r in rows}):
            vals = {r["relation_type"]: float(r["accuracy"]) for r in rows
                    if r["category"] == cat and int(r["D"]) == D}
            print(f"{cat:<12}" + "".join(f"{vals.get(t, float('nan')):>19.2f}" for t in types))


if __name__ == "__main__":
    run()
