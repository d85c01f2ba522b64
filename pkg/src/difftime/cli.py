"""``difftime`` command line.

Exit codes: 0 success, 2 when some grid items failed or were skipped,
1 on a fatal error (bad manifest, missing analytic target, ...).
"""
from __future__ import annotations

import argparse
import sys

from difftime import experiments as ex
from difftime.config import load_manifest

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="TOML run manifest")
    p.add_argument("--seed", type=int, help="override the manifest seed")
    p.add_argument("--out-dir", help="override the output directory")
    p.add_argument("--workers", type=int, help="parallel jobs over the T grid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difftime", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("train-scores", "train one score network per T"),
        ("fit-aux", "fit a BIC-selected bridge mixture per T"),
        ("elbo-sweep", "ELBO decomposition over the T grid, baseline and bridged"),
        ("kl-bounds", "decay-rate check of KL(p_T || p_noise)"),
    ):
        _common(sub.add_parser(name, help=help_))
    p = sub.add_parser("sample", help="reverse-diffusion samples and their log-likelihood under p_data")
    _common(p)
    p.add_argument("--mode", choices=ex.SAMPLE_MODES, default="baseline")
    p.add_argument("--T", type=float, action="append", help="diffusion time (repeatable); default: the grid")
    p = sub.add_parser("bpd", help="bits/dim of held-out points through the probability-flow ODE")
    _common(p)
    p.add_argument("--mode", choices=ex.BPD_MODES, default="baseline")
    p.add_argument("--T", type=float, action="append", help="diffusion time (repeatable); default: the grid")
    return parser


def run(args) -> int:
    manifest = load_manifest(args.manifest).with_overrides(args.seed, args.out_dir, args.workers)
    if args.command == "train-scores":
        res = ex.cmd_train_scores(manifest)
    elif args.command == "fit-aux":
        res = ex.cmd_fit_aux(manifest)
    elif args.command == "elbo-sweep":
        res = ex.cmd_elbo_sweep(manifest)
    elif args.command == "kl-bounds":
        res = ex.cmd_kl_bounds(manifest)
    elif args.command == "sample":
        res = ex.cmd_sample(manifest, args.mode, args.T)
    else:
        res = ex.cmd_bpd(manifest, args.mode, args.T)
    for line in res.lines:
        print(line)
    return EXIT_PARTIAL if res.partial else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except Exception as exc:
        print(f"difftime: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
