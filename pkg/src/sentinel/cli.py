"""Command-line entry points: serve, simulate, eval, calibrate, lora-params, rollback.

Exit codes: 0 success, 2 usage/config error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .deploy import NoPreviousVersion, Registry
from .metrics import EvalPair, EmptyInput, EmptyTruth, ece, evaluation_report
from .parsing import load_format_rules
from .replay import lora_param_count
from .sim import SimScenario, report_json, simulate

USAGE_ERROR = 2
DATA_ERROR = 3


def _write_out(payload: str, out: str | None) -> None:
    if out:
        Path(out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)


def _cmd_serve(args) -> int:
    from .service import serve

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    serve(config)
    return 0


def _cmd_simulate(args) -> int:
    if args.scenario:
        try:
            raw = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
            scenario = SimScenario.from_dict(raw)
        except FileNotFoundError:
            print(f"scenario file not found: {args.scenario}", file=sys.stderr)
            return USAGE_ERROR
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            print(f"invalid scenario: {exc}", file=sys.stderr)
            return DATA_ERROR
    else:
        scenario = SimScenario(n_vehicles=args.vehicles, seed=args.seed)
    workdir = args.workdir or "sim-run"
    report = simulate(scenario, workdir, mode="http" if args.http else "inprocess")
    _write_out(report_json(report), args.out)
    return 0


def _load_pairs(path: str) -> list[EvalPair]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        d = json.loads(line)
        pairs.append(
            EvalPair(
                predicted=d["predicted"],
                truth=d["truth"],
                confidence=float(d.get("confidence", 0.0)),
                state_predicted=d.get("state_predicted"),
                state_truth=d.get("state_truth"),
            )
        )
    return pairs


def _cmd_eval(args) -> int:
    try:
        pairs = _load_pairs(args.pairs)
    except FileNotFoundError:
        print(f"pairs file not found: {args.pairs}", file=sys.stderr)
        return USAGE_ERROR
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"malformed pairs file: {exc}", file=sys.stderr)
        return DATA_ERROR
    rules = load_format_rules(args.rules) if args.rules else None
    try:
        report = evaluation_report(pairs, num_bins=args.bins, rules=rules)
    except (EmptyInput, EmptyTruth, ValueError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return DATA_ERROR
    _write_out(json.dumps(report, indent=2, sort_keys=True), args.out)
    return 0


def _cmd_calibrate(args) -> int:
    # Accepts either EvalPair lines or bare {"confidence": x, "correct": bool}.
    pairs = []
    try:
        for line in Path(args.log).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if "predicted" in d and "truth" in d:
                pairs.append(
                    EvalPair(d["predicted"], d["truth"], float(d.get("confidence", 0.0)))
                )
            else:
                correct = bool(d["correct"])
                pairs.append(
                    EvalPair("x", "x" if correct else "y", float(d["confidence"]))
                )
    except FileNotFoundError:
        print(f"log file not found: {args.log}", file=sys.stderr)
        return USAGE_ERROR
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"malformed prediction log: {exc}", file=sys.stderr)
        return DATA_ERROR
    try:
        value, bins = ece(pairs, args.bins)
    except (EmptyInput, ValueError) as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return DATA_ERROR
    payload = {"count": len(pairs), "ece": value, "bins": [b.to_dict() for b in bins]}
    _write_out(json.dumps(payload, indent=2, sort_keys=True), args.out)
    return 0


def _cmd_lora_params(args) -> int:
    try:
        count = lora_param_count(args.layers, args.modules, args.dim, args.rank)
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return USAGE_ERROR
    print(count)
    return 0


def _cmd_rollback(args) -> int:
    registry = Registry(args.registry)
    try:
        current, previous = registry.rollback()
    except NoPreviousVersion as exc:
        print(f"rollback failed: {exc}", file=sys.stderr)
        return DATA_ERROR
    _write_out(json.dumps({"current": current, "previous": previous}), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sentinel",
        description="Plate-recognition orchestration service, simulator, and evaluation tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", required=True, help="service config JSON")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("simulate", help="run a closed-loop simulation")
    p.add_argument("--scenario", help="scenario JSON file (defaults otherwise)")
    p.add_argument("--vehicles", type=int, default=1000)
    p.add_argument("--seed", type=int, default=20240601)
    p.add_argument("--workdir", help="directory for generated artifacts (default sim-run)")
    p.add_argument("--http", action="store_true", help="drive a spawned HTTP service")
    p.add_argument("--out", help="write the SimReport here instead of stdout")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("eval", help="metrics report from an EvalPair JSONL file")
    p.add_argument("--pairs", required=True)
    p.add_argument("--rules", help="plate format rules JSON")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("calibrate", help="ECE and reliability bins from a prediction log")
    p.add_argument("--log", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("lora-params", help="adapter parameter count")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--modules", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.set_defaults(func=_cmd_lora_params)

    p = sub.add_parser("rollback", help="swap current and previous model versions")
    p.add_argument("--registry", required=True, help="model registry directory")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_rollback)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; normalize other codes
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
