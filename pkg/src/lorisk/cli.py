"""Command-line entry point ``lo-risk``.

Exit codes: 0 success, 1 audit failure, 2 configuration error,
3 solver nonconvergence beyond the allowed fraction.
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import verify
from ._io import write_csv, write_json
from .config import ConfigError, build_model, build_penalty, build_solver, dump_config, load_config, resolve
from .model import compute_snr, generate_dataset
from .risk import CSV_COLUMNS, risk_report
from .solver import NonConvergence, SolverDivergence, fit, fit_loo

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_NONCONV = 0, 1, 2, 3
MAX_UNCONVERGED = 0.05

SUBCOMMANDS = ("fit", "lo", "rate", "audit-lemma4", "audit-lemma8", "audit-moments", "snr")
OUTPUTS = {
    "fit": ("fit.json", "summary.json"),
    "lo": ("risk_report.csv", "summary.json"),
    "rate": ("rate_report.csv", "risk_report.csv", "summary.json"),
    "audit-lemma4": ("bound_audit.csv", "summary.json"),
    "audit-lemma8": ("bound_audit.csv", "summary.json"),
    "audit-moments": ("moments.csv", "summary.json"),
    "snr": ("snr.csv", "summary.json"),
}
# subcommands that take their sizes from the experiment section
SIZE_FROM_GRID = ("rate", "audit-moments", "snr")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lo-risk", description="Leave-one-out risk experiments for penalized GLMs.")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML experiment document")
        sp.add_argument("--output-dir", default="out", help="directory for reports (created if absent)")
        sp.add_argument("--threads", type=int, default=None, help="worker processes; 0 = all cores")
        sp.add_argument("--seed", type=int, default=0, help="base seed")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. penalty.lambda=2")
        sp.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    return ap


def _threads(arg: int | None) -> int:
    if arg is None:
        arg = int(os.environ.get("LO_RISK_THREADS", "1"))
    if arg <= 0:
        arg = os.cpu_count() or 1
    return arg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_config(args.config)
        cfg = resolve(doc, args.overrides, require_size=args.subcommand not in SIZE_FROM_GRID)
    except OSError as e:
        print(f"lo-risk: cannot read config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"lo-risk: {e}", file=sys.stderr)
        return EXIT_CONFIG
    threads = _threads(args.threads)
    out = args.output_dir
    if args.dry_run:
        print(f"subcommand: {args.subcommand}\nseed: {args.seed}\nthreads: {threads}")
        print("outputs: " + ", ".join(os.path.join(out, f) for f in OUTPUTS[args.subcommand]))
        print("config:\n" + dump_config(_plain(cfg)))
        return EXIT_OK
    os.makedirs(out, exist_ok=True)
    handler = globals()["_cmd_" + args.subcommand.replace("-", "_")]
    with threadpool_limits(1):
        try:
            code, summary = handler(cfg, args.seed, threads, out)
        except ConfigError as e:
            print(f"lo-risk: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except (NonConvergence, SolverDivergence, verify.RateAbort) as e:
            print(f"lo-risk: {e}", file=sys.stderr)
            code, summary = EXIT_NONCONV, {"error": str(e)}
    summary = {"subcommand": args.subcommand, "seed": args.seed, "exit_code": code,
               "status": {0: "ok", 1: "audit_failed", 3: "nonconvergence"}[code], **summary,
               "config": _plain(cfg)}
    write_json(os.path.join(out, "summary.json"), summary)
    return code


def _plain(cfg):
    if isinstance(cfg, dict):
        return {k: _plain(v) for k, v in cfg.items()}
    if isinstance(cfg, list):
        return [_plain(v) for v in cfg]
    return cfg


def _data_seed(seed: int, n: int) -> int:
    return verify._int_seed(verify.seed_for(seed, n, 0, verify.PURPOSE_DATA))


def _cmd_fit(cfg, seed, threads, out):
    model = build_model(cfg)
    pen = build_penalty(cfg, model.p)
    data = generate_dataset(model, _data_seed(seed, model.n))
    res = fit(model, pen, data, build_solver(cfg), strict=False)
    write_json(os.path.join(out, "fit.json"), {
        "beta_hat": np.asarray(res.beta_hat), "objective": res.objective, "fp_residual": res.fp_residual,
        "iters": res.iters, "converged": res.converged, "alpha_used": res.alpha_used, "route": res.route,
        "n_backtracks": res.n_backtracks, "n": model.n, "p": model.p,
    })
    code = EXIT_OK if res.converged else EXIT_NONCONV
    return code, {"objective": res.objective, "fp_residual": res.fp_residual, "converged": res.converged}


def _cmd_lo(cfg, seed, threads, out):
    model = build_model(cfg)
    pen = build_penalty(cfg, model.p)
    data = generate_dataset(model, _data_seed(seed, model.n))
    loo = fit_loo(model, pen, data, build_solver(cfg), strict=False)
    e = cfg["experiment"]
    rep = risk_report(loo, data, model, pen, e["m_oo"], verify.seed_for(seed, model.n, 0, verify.PURPOSE_OO),
                      decomposition=bool(e["decomposition"]), m_cond=e["m_cond"])
    write_csv(os.path.join(out, "risk_report.csv"), CSV_COLUMNS, [rep.to_row()])
    bad = sum(not f.converged for f in loo.per_i) + (not loo.full.converged)
    code = EXIT_NONCONV if bad > MAX_UNCONVERGED * (data.n + 1) else EXIT_OK
    return code, {"lo": rep.lo, "oo_mc": rep.oo_mc, "oo_mc_se": rep.oo_mc_se, "sq_err": rep.sq_err,
                  "mc_bias": rep.mc_bias, "v1": rep.v1, "v2": rep.v2, "unconverged": bad}


def _cmd_rate(cfg, seed, threads, out):
    rep = verify.run_rate_experiment(verify.RateExperiment.from_config(cfg, seed), threads)
    write_csv(os.path.join(out, "rate_report.csv"), verify.RateReport.ROW_COLUMNS, rep.rows)
    write_csv(os.path.join(out, "risk_report.csv"), CSV_COLUMNS, [r.to_row() for r in rep.replicates])
    in_bracket = -1.5 <= rep.slope <= -0.6
    return EXIT_OK, {
        "slope": rep.slope, "intercept": rep.intercept, "slope_ci": list(rep.ci), "ci_width": rep.ci_width,
        "slope_in_bracket": in_bracket, "m_oo": rep.m_oo, "bias_ok": rep.bias_ok,
        "failures": rep.failures, "notes": rep.notes,
    }


def _audit_summary(rep: verify.BoundAuditReport, out: str):
    write_csv(os.path.join(out, "bound_audit.csv"), verify.BoundAuditReport.COLUMNS, [r.to_row() for r in rep.records])
    worst = max((r.lhs - r.rhs - r.slack for r in rep.records), default=-math.inf)
    code = EXIT_OK if rep.all_pass else EXIT_AUDIT
    return code, {"pass_rate": rep.pass_rate, "checks": len(rep.records), "mode": rep.mode,
                  "worst_margin": worst, "notes": rep.notes}


def _cmd_audit_lemma4(cfg, seed, threads, out):
    rep = verify.run_instances(verify.lemma4_instance, cfg, int(cfg["experiment"]["seeds"]), seed, threads)
    return _audit_summary(rep, out)


def _cmd_audit_lemma8(cfg, seed, threads, out):
    rep = verify.run_instances(verify.lemma8_instance, cfg, int(cfg["experiment"]["seeds"]), seed, threads)
    return _audit_summary(rep, out)


def _cmd_audit_moments(cfg, seed, threads, out):
    e = cfg["experiment"]
    rep = verify.audit_moments(cfg, e["n_grid"], int(e["moment_replicates"]), int(e["n_draws"]), seed, threads)
    write_csv(os.path.join(out, "moments.csv"), verify.MomentsReport.COLUMNS, rep.rows)
    return (EXIT_OK if rep.all_pass else EXIT_AUDIT), {"all_pass": rep.all_pass, "notes": rep.notes}


SNR_COLUMNS = ("p", "signal_var", "mean_noise_var", "snr", "snr_se", "infinite")


def _cmd_snr(cfg, seed, threads, out):
    e = cfg["experiment"]
    rows = []
    g0 = float(cfg["model"]["gamma0"])
    for p in e["snr_p_grid"]:
        model = build_model(cfg, round(g0 * p))
        r = compute_snr(model, int(e["snr_samples"]), verify._int_seed(verify.seed_for(seed, p, 0, verify.PURPOSE_MOMENT)))
        rows.append({"p": model.p, "signal_var": r.signal_var, "mean_noise_var": r.mean_noise_var,
                     "snr": r.snr, "snr_se": r.snr_se, "infinite": int(r.infinite)})
    write_csv(os.path.join(out, "snr.csv"), SNR_COLUMNS, rows)
    bounded = all(0 < r["snr"] < 100 for r in rows)
    stable = all(abs(a["snr"] - b["snr"]) <= 3 * math.hypot(a["snr_se"], b["snr_se"]) for a, b in zip(rows, rows[1:]))
    return (EXIT_OK if bounded and stable else EXIT_AUDIT), {"bounded": bounded, "stable": stable,
                                                             "snr": [r["snr"] for r in rows]}


if __name__ == "__main__":
    sys.exit(main())
