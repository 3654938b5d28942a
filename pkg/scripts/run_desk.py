"""Run the desk-scale motif-base pipeline and print the lambda sweep and downstream table."""
import argparse
import json
import sys
from pathlib import Path

from oodaug.cli import main

ROOT = Path(__file__).resolve().parent.parent


def show(out: Path) -> None:
    summary = json.loads((out / "report/summary.json").read_text())
    print(f"{'lambda':>6} {'mmd':>8} {'+-':>7} {'pres':>6} {'valid':>6} {'conn':>6}")
    for r in sorted(summary["rows"], key=lambda r: r["lambda"]):
        print(f"{r['lambda']:6.1f} {r['mmd_mean']:8.4f} {r['mmd_stderr']:7.4f} "
              f"{r['preservation']:6.3f} {r['validity']:6.2f} {r['connected']:6.2f}")
    for mode, (mean, std, val) in summary.get("downstream", {}).items():
        lam = summary.get("downstream_lambda", {}).get(mode)
        tag = f" (lambda={lam})" if lam is not None else ""
        print(f"{mode:>14}: test {100 * mean:.2f} +- {100 * std:.2f}  val {100 * val:.2f}{tag}")
    timings = out / "timings.json"
    if timings.exists():
        print(f"wall clock: {sum(json.loads(timings.read_text()).values()) / 60:.1f} min")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs/motif_base_desk.yaml"))
    ap.add_argument("--out", default=str(ROOT / "runs/motif_base_desk"))
    args = ap.parse_args()
    code = main(["-v", "pipeline", args.config, "--out", args.out])
    if code:
        sys.exit(code)
    show(Path(args.out))
