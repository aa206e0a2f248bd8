"""
Command line entry point ``sbldp``.

Every subcommand reads one JSON config (``--config``), writes CSV/JSON files
and a ``manifest.json`` into ``--out-dir`` and prints the summary JSON.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
import warnings

from .config import ExperimentConfig
from .errors import ConfigError, SBError
from .io import dumps
from .pipeline import RUNNERS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_HELP = {
    "simulate": ("Simulate paths for the `bridge` block (mode bridge|forward|reversed).",
                 "paths.csv: path_id,step,t,x1..xd; summary.json: moments at t=0.25,0.5,0.75."),
    "sinkhorn": ("Entropic and exact plans for `marginals` at model eta plus `solver.eta_schedule`.",
                 "plan.csv/exact_plan.csv: i,j,x,y,weight; duals.csv: side,index,atom,potential; "
                 "schedule.csv: eta,objective,exact,gap,bound,within,marginal_error."),
    "rate": ("Bridge and dynamic rates of --path (CSV t,x1,..) or of the `paths` block.",
             "rate.json (or --out): bridge_rate, both control parameterizations, dynamic rate."),
    "minimize": ("Minimum-action path for `bridge` and `functional`.",
                 "path.csv: t,x1..xd; summary.json: value, f_value, rate, grad_norm, converged."),
    "laplace-sweep": ("Laplace estimates over `sweep.etas` against the variational value.",
                      "sweep.csv: eta,estimate,stderr,variational,gap,estimator,ess; "
                      "summary.json: trend_slope, final_gap, pass."),
    "uniform-scan": ("Maximum Laplace gap over the endpoint pairs `sweep.pairs`.",
                     "scan.csv: eta,x,y,estimate,stderr,variational,gap,estimator "
                     "(vectors joined by ';'); summary.json: max_gaps, trend_slope, pass."),
    "ldp-check": ("Tube probabilities of the dynamic bridge (`tube`, `marginals`).",
                  "tube.csv: eta,hits,frequency,minus_eta_log_p,stderr,inf_rate,gap,zero_hits; "
                  "summary.json: inf_rate, trend_slope, pass."),
    "run-dynamic-sb": ("Static plan, coupling draws and bridge interpolation.",
                       "plan.csv, duals.csv, paths.csv, rate_<k>.json, [tube.csv], summary.json."),
    "validate": ("Runtime proxies for the standing assumptions.",
                 "validate.csv: proxy,status,value; summary.json: rows with details."),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbldp", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (desc, outputs) in _HELP.items():
        p = sub.add_parser(name, help=desc, description=desc, epilog=f"Outputs: {outputs}")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out-dir", default=None, help="output directory (default: output.dir)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        if name == "rate":
            p.add_argument("--path", default=None, help="path CSV with header t,x1,...")
            p.add_argument("--out", default=None, help="output JSON file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config).with_seed(args.seed)
        if args.threads < 1:
            raise ConfigError("must be >= 1", "--threads")
        out_dir = args.out_dir or cfg.data["output"]["dir"]
        kwargs = {}
        if args.command == "rate":
            kwargs = {"path_csv": args.path, "out_file": args.out}
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            summary = RUNNERS[args.command](cfg, out_dir, args.threads, **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SBError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    sys.stdout.write(dumps(summary))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
