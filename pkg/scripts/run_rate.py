"""Run the LO-vs-OO rate experiment on a template and print the fitted slope.

    python3 scripts/run_rate.py [--config templates/logistic_lasso.cfg] [--out runs/rate]
"""
import argparse
import json
import os
import sys

from lorisk.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(HERE, "..", "templates", "logistic_lasso.cfg"))
    ap.add_argument("--out", default="runs/rate")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--threads", type=int, default=0)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    return ap.parse_args()


if __name__ == "__main__":
    a = parse_args()
    argv = ["rate", "--config", a.config, "--output-dir", a.out, "--seed", str(a.seed), "--threads", str(a.threads)]
    for o in a.overrides:
        argv += ["--set", o]
    code = main(argv)
    with open(os.path.join(a.out, "summary.json")) as fh:
        s = json.load(fh)
    lo, hi = s["slope_ci"]
    print(f"slope {s['slope']:.3f}  CI [{lo:.3f}, {hi:.3f}]  m_oo {s['m_oo']}  exit {code}")
    sys.exit(code)
