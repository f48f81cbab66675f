"""Run every bound and moment audit over the shipped templates.

Each run writes into OUT/<subcommand>-<template>/; the exit code is the
worst one seen.
"""
import argparse
import json
import os
import sys

from lorisk.cli import main

TEMPLATES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "templates")

RUNS = [
    ("audit-lemma4", "logistic_nuclear.cfg"),
    ("audit-lemma4", "poisson_glasso.cfg"),
    ("audit-lemma4", "linear_fused.cfg"),
    ("audit-lemma8", "lasso_smoothing.cfg"),
    ("audit-moments", "moments.cfg"),
    ("snr", "logistic_lasso.cfg"),
]


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/audits")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=0)
    a = ap.parse_args()
    worst = 0
    for sub, name in RUNS:
        out = os.path.join(a.out, f"{sub}-{name.removesuffix('.cfg')}")
        code = main([sub, "--config", os.path.join(TEMPLATES, name), "--output-dir", out,
                     "--seed", str(a.seed), "--threads", str(a.threads)])
        with open(os.path.join(out, "summary.json")) as fh:
            status = json.load(fh).get("status")
        print(f"{sub:14s} {name:22s} exit {code} {status}")
        worst = max(worst, code)
    sys.exit(worst)
