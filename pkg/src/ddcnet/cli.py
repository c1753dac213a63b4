"""Command line entry point: ``ddcnet {collect,train,run,plot,compare}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness

EPILOG = f"""environment:
  {harness.ENV_SEED}        overrides the [experiment] seed
  {harness.ENV_OUTPUT_DIR}  overrides [paths] output_dir

errors are reported on stderr as a single line: error: <Kind>: <message>"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: UsageError: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="ddcnet",
        description="Learned-dynamics pedal control: collect, train, run, plot, compare.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="sectioned key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--duration-s", type=float)

    sp = sub.add_parser("collect", help="run the random controller and write a trajectory CSV")
    common(sp)
    sp.add_argument("--out", type=Path, help="trajectory path (default: [paths] trajectory)")

    sp = sub.add_parser("train", help="train the forward model from a trajectory CSV")
    common(sp)
    sp.add_argument("--trajectory", type=Path)
    sp.add_argument("--model", type=Path)

    sp = sub.add_parser("run", help="closed-loop experiment; writes log, timing and summary")
    common(sp)
    sp.add_argument("--controller", choices=harness.CONTROLLERS)
    sp.add_argument("--target-kmh", type=float)

    sp = sub.add_parser("plot", help="render a run log as SVG")
    common(sp)
    sp.add_argument("--log", type=Path)
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("compare", help="tabulate run summaries and check the convergence order")
    sp.add_argument("summaries", nargs="+", type=Path)
    sp.add_argument("--config", type=Path)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure the same way
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "compare":
        summaries = [json.loads(Path(p).read_text()) for p in args.summaries]
        table, violations = harness.compare(summaries)
        print(table)
        return 0

    cfg = harness.load_config(args.config)
    if args.command == "collect":
        if args.seed is not None:
            cfg.collect_seed = args.seed
        if args.duration_s is not None:
            cfg.collect_duration_s = args.duration_s
        cfg.validate()
        traj = harness.collect_data(cfg, args.out)
        print(f"wrote {len(traj)} rows to {args.out or cfg.path('trajectory')}")
    elif args.command == "train":
        if args.seed is not None:
            cfg.train["seed"] = str(args.seed)
        model = harness.train_from_file(cfg, args.trajectory, args.model)
        print(f"best test loss {model.best_test_loss_:.6g} at epoch {model.best_epoch_}; "
              f"wrote {args.model or cfg.path('model')}")
    elif args.command == "run":
        for key in ("controller", "target_kmh", "seed", "duration_s"):
            value = getattr(args, key)
            if value is not None:
                setattr(cfg, key, value)
        cfg.validate()
        result = harness.run_experiment(cfg)
        print(json.dumps(result.summary, sort_keys=True))
    elif args.command == "plot":
        out = harness.emit_plot(args.log or cfg.path("log"), args.out or cfg.path("plot"))
        print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
