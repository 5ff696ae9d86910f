"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 verification
failure (gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import ablate, data, gradcheck, train
from .config import TrainConfig, load_config
from .errors import ContractError, FormatError, ShapeError


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    p = _Parser(prog="casd", description="Attention self-distillation trainer for weakly labelled shapes")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate train/test splits of the synthetic shapes dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=500)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="flat key = value config file (defaults when omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="halt and checkpoint after this many steps")
    t.add_argument("--verbose", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")

    a = sub.add_parser("ablate", help="train and evaluate an ablation row set")
    a.add_argument("--config", help="base config file (defaults when omitted)")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument(
        "--rows",
        default="main",
        choices=("main", "layers", "regularizers", "gamma"),
        help="main component table, layer sets, regularizer strategies, or the gamma sweep",
    )
    a.add_argument("--verbose", action="store_true")

    c = sub.add_parser("grad-check", help="finite-difference verification of ops and the full loss")
    c.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("dump-attention", help="write attention maps of one sample as TNSR + PGM")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="train")
    d.add_argument("--sample", type=int, required=True)
    d.add_argument("--proposals", type=int, nargs="+", default=[0])
    d.add_argument("--out", required=True)
    return p


def _load_cfg(path):
    return load_config(path) if path else TrainConfig()


_ROW_SETS = {
    "main": lambda: ablate.MAIN_ROWS,
    "layers": lambda: ablate.LAYER_ROWS,
    "regularizers": lambda: ablate.REGULARIZER_ROWS,
    "gamma": ablate.gamma_rows,
}


def _run(args):
    if args.command == "gen-data":
        train_manifest = data.generate_dataset(args.out, args.seed, args.n_train, "train")
        test_manifest = data.generate_dataset(args.out, args.seed + 1, args.n_test, "test")
        for m in (train_manifest, test_manifest):
            print(f"{m.split}: {m.count} images, proposal coverage {data.proposal_coverage(m):.3f}")
        return 0

    if args.command == "train":
        cfg = _load_cfg(args.config)
        ckpt = train.run_training(
            cfg, args.data, args.out, resume=args.resume, quiet=not args.verbose,
            stop_after=args.stop_after,
        )
        print(f"checkpoint written to {ckpt}")
        return 0

    if args.command == "eval":
        report = train.run_eval(args.ckpt, args.data, split=args.split)
        print(report.to_json())
        return 0

    if args.command == "ablate":
        cfg = _load_cfg(args.config)
        table = ablate.run_ablation_suite(
            cfg,
            args.data,
            args.out,
            seeds=tuple(range(args.seeds)),
            rows=_ROW_SETS[args.rows](),
            quiet=not args.verbose,
        )
        print(json.dumps(table, indent=1, sort_keys=True))
        return 0

    if args.command == "grad-check":
        results, ok = gradcheck.run_gradient_checks(seed=args.seed, verbose=True)
        print("all checks passed" if ok else "FAILED")
        return 0 if ok else 3

    if args.command == "dump-attention":
        written = train.dump_attention_maps(
            args.ckpt, args.data, args.split, args.sample, args.proposals, args.out
        )
        print(f"wrote {len(written)} map pairs to {args.out}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _run(args)
    except (FormatError, ShapeError, ContractError, FileNotFoundError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
