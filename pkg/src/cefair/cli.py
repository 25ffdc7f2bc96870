"""Command-line entry point: ``cefair {ingest,train,explain,evaluate,curve}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import DataError
from .pipeline import (METHODS, RunConfig, cmd_curve, cmd_evaluate, cmd_explain, cmd_ingest,
                       cmd_train, set_path, version_string)
from .ranker import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cefair")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--output-dir", help="directory for checkpoints and reports")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. cef.lam=0.01 (repeatable)")
    common.add_argument("--force", action="store_true",
                        help="continue when upstream artifacts were built under another config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cefair", description="Counterfactual explanations of exposure unfairness "
                                            "in feature-aware recommenders.")
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ing = sub.add_parser("ingest", parents=[common], help="parse, filter, split, build matrices")
    ing.add_argument("--synthetic", action="store_true",
                     help="generate a planted-bias dataset instead of reading files")
    ing.add_argument("--interactions")
    ing.add_argument("--quadruples")
    tr = sub.add_parser("train", parents=[common], help="fit the ranker")
    tr.add_argument("--merge", choices=("product", "concat"))
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epochs", type=int)

    exp = sub.add_parser("explain", parents=[common], help="rank features as fairness explanations")
    exp.add_argument("--method", default="cef",
                     choices=[m.replace("_", "-") for m in METHODS])
    exp.add_argument("--target", choices=("user", "item", "both"),
                     help="which matrix the counterfactual perturbs (cef only)")
    exp.add_argument("--top", type=int, default=5, help="rows in the printed table")

    sub.add_parser("evaluate", parents=[common], help="erase top-E features, report metrics")
    sub.add_parser("curve", parents=[common], help="cumulative-erasure trade-off curves")
    return p


def resolve_config(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON: {e}") from None
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        set_path(raw, key, _json_value(value))
    for flag, key in (("output_dir", "output_dir"), ("seed", "seed"),
                      ("interactions", "interactions"), ("quadruples", "quadruples")):
        value = getattr(args, flag, None)
        if value is not None:
            raw[key] = value
    for flag, key in (("merge", "merge_kind"), ("lr", "train.learning_rate"),
                      ("epochs", "train.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            set_path(raw, key, value)
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def format_table(report: dict, top: int) -> str:
    rows = report["explanations"][:top]
    lines = [f"top-{len(rows)} features by {report['method']}",
             f"{'rank':>4}  {'feature':<20} {'score':>12} {'validity':>10} {'proximity':>12}"]
    for row in rows:
        val = "" if row["validity"] is None else f"{row['validity']:.4f}"
        prox = "" if row["proximity"] is None else f"{row['proximity']:.4g}"
        lines.append(f"{row['rank']:>4}  {str(row['feature_name']):<20} {row['score']:>12.6g} "
                     f"{val:>10} {prox:>12}")
    return "\n".join(lines)


def _dispatch(args, config: RunConfig):
    if args.command == "ingest":
        report = cmd_ingest(config, synthetic=args.synthetic)
        print(f"ingested {report['users']} users, {report['items']} items, "
              f"{report['features']} features into {config.output_dir}")
    elif args.command == "train":
        report = cmd_train(config, args.force)
        for K, mk in report["test_metrics"].items():
            print(f"K={K}: F1 {mk['f1']:.4g}%  NDCG {mk['ndcg']:.4g}%")
    elif args.command == "explain":
        method = args.method.replace("-", "_")
        if args.target and method != "cef":
            raise UsageError("--target applies to --method cef only")
        report = cmd_explain(config, method, args.target, args.force)
        print(format_table(report, args.top))
        for f, msg in report["failures"].items():
            print(f"feature {f} failed: {msg}", file=sys.stderr)
    elif args.command == "evaluate":
        report = cmd_evaluate(config, args.force)
        print(f"wrote {report['points']} points for {', '.join(report['methods'])}")
    else:
        report = cmd_curve(config, args.force)
        print(f"wrote {report['points']} curve points for {', '.join(report['methods'])}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        if args.verbose:
            print(json.dumps(config.to_dict(), indent=2, sort_keys=True), file=sys.stderr)
        _dispatch(args, config)
    except UsageError as e:
        print(f"cefair: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"cefair: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, ZeroDivisionError) as e:
        print(f"cefair: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
