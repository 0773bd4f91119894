"""Command line entry point: ``fdglab <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import domains as D
from . import harness as H
from .errors import FdglabError


def _config(args):
    cfg = H.ExperimentConfig.from_json(args.config) if args.config else H.ExperimentConfig()
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg.validate()


def cmd_train(args):
    rows = H.run_experiment(_config(args), write_checkpoints=not args.no_checkpoints)
    for r in rows:
        print(f"{r.method} held_out={r.held_out} seed={r.seed} test_acc={r.test_acc:.2f} "
              f"round={r.selection_round}")


def _print_suite(suite):
    for s in suite:
        print(f"{s.arm:32s} " + " ".join(f"{a:6.2f}" for a in s.per_domain) + f"  avg={s.avg:.2f}")


def cmd_sweep(args):
    suite = H.lambda_sweep(replace(_config(args), regularizer=H.GUIDING))
    _print_suite(suite)
    print(f"best lambda: {H.best_lambda(suite):g}")


def cmd_ablate(args):
    _print_suite(H.ablation_suite(_config(args), lam=args.lam))


def cmd_prox(args):
    mu = tuple(args.mu) if args.mu else H.MU_GRID
    _print_suite(H.fedprox_comparison(replace(_config(args), norm_scheme=H.XAN), mu, lam=args.lam))


def cmd_cost(args):
    report = H.cost_model(args.method, args.R, args.N, args.C, args.d)
    text = H.format_cost(report)
    Path(args.output_dir or ".").mkdir(parents=True, exist_ok=True)
    (Path(args.output_dir or ".") / "cost.txt").write_text(text)
    print(text, end="")


def cmd_export(args):
    out = Path(args.out)
    H.export_features(args.ckpt, D.load_domain(args.data, args.domain_id), out)
    print(f"wrote {out}")


def cmd_make_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in D.load_preset(args.preset):
        data = D.generate_domain(spec, args.n, args.classes, args.size, args.seed)
        path = out / f"domain{spec.domain_id}.bin"
        D.save_domain(data, path)
        print(f"wrote {path} ({len(data)} samples)")


def build_parser():
    p = argparse.ArgumentParser(prog="fdglab", description="Federated domain generalization experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every finished run")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="ExperimentConfig JSON (defaults if omitted)")
        sp.add_argument("--output-dir", help="override the config's output_dir")
        sp.set_defaults(func=func)
        return sp

    sp = with_config("train", cmd_train, "leave-one-domain-out rotation; writes results.csv")
    sp.add_argument("--no-checkpoints", action="store_true")
    with_config("sweep", cmd_sweep, "lambda sweep; writes sweep.csv")
    sp = with_config("ablate", cmd_ablate, "normalization x regularizer ablation; writes ablation.csv")
    sp.add_argument("--lam", type=float, help="guiding weight (default: best lambda from a sweep)")
    sp = with_config("prox", cmd_prox, "proximal-term comparison; writes prox.csv")
    sp.add_argument("--mu", type=float, nargs="+", help=f"proximal weights (default {list(H.MU_GRID)})")
    sp.add_argument("--lam", type=float, help="guiding weight (default: best lambda from a sweep)")

    sp = sub.add_parser("cost", help="parameter-count cost table entry; writes cost.txt")
    sp.add_argument("--method", required=True, choices=H.COST_METHODS, type=str.upper)
    sp.add_argument("-R", type=int, required=True, help="model parameter count")
    sp.add_argument("-N", type=int, required=True, help="number of clients")
    sp.add_argument("-C", type=int, required=True, help="number of classes")
    sp.add_argument("-d", type=int, required=True, help="feature dimension")
    sp.add_argument("--output-dir")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("export-features", help="pooled features of a dataset file as CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="domain file written by make-data")
    sp.add_argument("--domain-id", type=int, default=-1, help="value for the domain_id column")
    sp.add_argument("--out", default="features.csv")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("make-data", help="write one binary file per preset domain")
    sp.add_argument("--preset")
    sp.add_argument("--n", type=int, default=800)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="data")
    sp.set_defaults(func=cmd_make_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except FdglabError as exc:
        print(f"fdglab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
