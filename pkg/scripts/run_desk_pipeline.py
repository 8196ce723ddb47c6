"""Full desk-scale pipeline through the CLI: phantoms, descriptions, four models, metrics, counterfactuals.

    python3 scripts/run_desk_pipeline.py --out runs/desk
"""

import argparse
import csv
import json
import time
from pathlib import Path

from clinsynth.cli import main
from clinsynth.evaluation import MetricReport


def run(*argv: str) -> None:
    code = main(list(argv))
    if code != 0:
        raise SystemExit(f"clinsynth {argv[0]} exited with {code}")


def lung_shift(aggregate: Path) -> float:
    with open(aggregate) as fh:
        rows = [float(r["mean_delta"]) for r in csv.DictReader(fh) if r["class"] == "lung" and int(r["voxels"])]
    return sum(rows) / len(rows)


def main_(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--subjects", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args(argv)

    out = Path(args.out)
    data = out / "data"
    desk = ["--preset", "desk-scale"]
    start = time.perf_counter()
    run("phantom", "--out", str(data), "--subjects", str(args.subjects))
    run("convert", str(data / "clinical.csv"), "--out", str(out / "descriptions.txt"))
    manifest = ["--manifest", str(data / "manifest.jsonl")]
    summary = {}
    for backbone in ("pix2pix", "ddpm"):
        for text in (False, True):
            name = f"{backbone}{'+text' if text else ''}"
            run_dir = out / name.replace("+", "_")
            run("train", *manifest, "--out", str(run_dir), "--backbone", backbone, "--epochs", str(args.epochs),
                *(["--use-text"] if text else []), *desk)
            ck = str(run_dir / "final.pt")
            run("evaluate", *manifest, "--checkpoint", ck, "--out", str(run_dir / "eval"), *desk)
            report = MetricReport.read(run_dir / "eval" / "metrics.txt")
            summary[name] = {"fid": report.fid, "kid": report.kid_mean, "is": report.is_mean}
            if text:
                run("analyze", *manifest, "--checkpoint", ck, "--out", str(run_dir / "analyze"), *desk)
                summary[name]["lung_shift_yes_to_no"] = lung_shift(run_dir / "analyze" / "aggregate.csv")
    summary["seconds"] = round(time.perf_counter() - start, 1)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main_()
