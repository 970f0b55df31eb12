"""Command-line entry point.

Subcommands: ``init-model``, ``generate``, ``bench``, ``rank-analyze`` and
``calibrate``. Every flag can also come from an INI file passed with
``--config`` (section ``[eevo]``, keys spelled like the flags with
underscores); explicit flags win over the file. ``EEVO_SEED`` overrides
``--seed``.

Exit status: 0 ok, 2 usage, 3 I/O, 4 numeric or invariant violation.
Errors print a single ``eevo: error[<kind>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis, corpus
from .decoder import Mode, generate
from .errors import CapacityError, EevoError, InvalidInputError, NumericError, WeightFormatError
from .model import ModelConfig, init_random, load_weights, save_weights
from .policy import ExitPolicy, ThresholdSchedule

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
BENCH_COLUMNS = ["dataset", "mode", "lambda", "score", "flops_per_token", "avg_exit", "conf_time_s"]


class UsageError(EevoError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _grid(text: str) -> list[tuple[int, int]]:
    cells = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            p, k = item.split(":")
            cells.append((int(p), int(k)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"grid cells look like p:K, got {item!r}")
    return cells


# ---------------------------------------------------------------------------
# argument groups


def _add_model_args(parser, with_source: bool = True):
    g = parser.add_argument_group("model")
    if with_source:
        g.add_argument("--model", type=Path, help="weight file to load")
    g.add_argument("--seed", type=int, help="build a seeded random model instead (EEVO_SEED overrides)")
    g.add_argument("--L", dest="L", type=int, default=8)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--d-vocab", type=int, default=512)
    g.add_argument("--n-heads", type=int, default=4)
    g.add_argument("--d-ff", type=int, default=256)
    g.add_argument("--max-seq", type=int, default=128)


def _add_policy_args(parser):
    g = parser.add_argument_group("exit policy")
    g.add_argument("--measure", choices=["top2_diff", "max_softmax"], default="top2_diff")
    g.add_argument("--lambda", dest="lam", type=float, default=0.6)
    g.add_argument("--schedule", choices=["static", "decaying"], default="static")
    g.add_argument("--tau", type=float, default=4.0)
    g.add_argument("--p", dest="p", type=int, default=2, help="pruning exit")
    g.add_argument("--K", dest="K", type=int, default=64, help="pruned vocabulary size")
    g.add_argument("--N", dest="N", type=int, default=16, help="max new tokens")
    g.add_argument("--end-token", type=int)


def _add_prompt_args(parser):
    g = parser.add_argument_group("prompts")
    g.add_argument("--prompt", help="inline token ids, comma-separated")
    g.add_argument("--prompt-file", type=Path, help="one comma-separated prompt per line")
    g.add_argument("--demo", type=int, metavar="COUNT", help="COUNT prompts from the bundled corpus")
    g.add_argument("--prompt-len", type=int, default=8, help="demo prompt length")


def _add_config_arg(parser):
    parser.add_argument("--config", type=Path, help="INI file with an [eevo] section of flag values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eevo", description=__doc__.split("\n")[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    p = sub.add_parser("init-model", help="write a seeded random weight file")
    _add_config_arg(p)
    _add_model_args(p, with_source=False)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("generate", help="decode one prompt and write its trace")
    _add_config_arg(p)
    _add_model_args(p)
    _add_policy_args(p)
    _add_prompt_args(p)
    p.add_argument("--mode", choices=["full", "dvp"], default="dvp")
    p.add_argument("--prompt-index", type=int, default=0)
    p.add_argument("--out", type=Path, help="trace JSON path (stdout summary only if omitted)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="compare full and pruned decoding over several thresholds")
    _add_config_arg(p)
    _add_model_args(p)
    _add_policy_args(p)
    _add_prompt_args(p)
    p.add_argument("--lambdas", type=_float_list, default=[0.6, 0.99])
    p.add_argument("--dataset", help="label for the dataset column")
    p.add_argument("--no-timing", action="store_true", help="leave conf_time_s empty")
    p.add_argument("--out", type=Path, help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rank-analyze", help="per-layer rank of the final predicted token")
    _add_config_arg(p)
    _add_model_args(p)
    _add_prompt_args(p)
    p.add_argument("--N", dest="N", type=int, default=16)
    p.add_argument("--ks", type=_int_list, default=list(analysis.DEFAULT_KS))
    p.add_argument("--out", type=Path, help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_rank_analyze)

    p = sub.add_parser("calibrate", help="pick the cheapest (p, K) within an agreement budget")
    _add_config_arg(p)
    _add_model_args(p)
    _add_policy_args(p)
    _add_prompt_args(p)
    p.add_argument("--grid", type=_grid, help="cells as p:K,p:K,...")
    p.add_argument("--ps", type=_int_list, help="with --Ks: cartesian grid")
    p.add_argument("--Ks", type=_int_list)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--exhaustive-check", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out", type=Path, help="report JSON path (stdout if omitted)")
    p.set_defaults(func=cmd_calibrate)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Feed INI values in as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    ini = configparser.ConfigParser()
    ini.optionxform = str
    try:
        with open(known.config) as f:
            ini.read_file(f)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {known.config}: {exc}".replace("\n", " "))
    if not ini.has_section("eevo"):
        raise UsageError(f"config file {known.config} has no [eevo] section")
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(command)
    if sub is None:
        return
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in ini.items("eevo"):
        dest = key.replace("-", "_")
        dest = "lam" if dest == "lambda" else dest
        action = actions.get(dest)
        if action is None:
            raise UsageError(f"unknown key {key!r} in config file for {command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = ini.getboolean("eevo", key)
        elif action.type is not None:
            defaults[dest] = action.type(raw)
        else:
            defaults[dest] = raw
    sub.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# shared resolution


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        L=args.L, d_model=args.d_model, d_vocab=args.d_vocab,
        n_heads=args.n_heads, d_ff=args.d_ff, max_seq=args.max_seq,
    )


def _seed(args) -> int | None:
    env = os.environ.get("EEVO_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"EEVO_SEED must be an integer, got {env!r}")
    return args.seed


def _load_model(args):
    seed = _seed(args)
    path = getattr(args, "model", None)
    if path is not None and args.seed is not None:
        raise UsageError("give exactly one model source: --model or --seed")
    if path is not None:
        return load_weights(path)
    if seed is None:
        raise UsageError("no model source: pass --model or --seed")
    return init_random(_model_config(args), seed)


def _prompts(args, d_vocab: int) -> list[list[int]]:
    sources = [s for s in (args.prompt, args.prompt_file, args.demo) if s is not None]
    if len(sources) != 1:
        raise UsageError("give exactly one prompt source: --prompt, --prompt-file or --demo")
    if args.demo is not None:
        return corpus.demo_prompts(args.demo, args.prompt_len, d_vocab)
    if args.prompt is not None:
        lines = [args.prompt]
    else:
        lines = [ln for ln in args.prompt_file.read_text().splitlines() if ln.strip()]
    try:
        prompts = [_int_list(line) for line in lines]
    except argparse.ArgumentTypeError as exc:
        raise UsageError(str(exc))
    if not prompts or any(not p for p in prompts):
        raise UsageError("empty prompt")
    return prompts


def _policy(args, lam: float | None = None) -> ExitPolicy:
    return ExitPolicy(
        measure=args.measure,
        schedule=ThresholdSchedule(kind=args.schedule, lam=args.lam if lam is None else lam, tau=args.tau),
        prune_exit=args.p,
        prune_size=args.K,
        max_new_tokens=args.N,
    )


def _dataset_label(args) -> str:
    if getattr(args, "dataset", None):
        return args.dataset
    if args.demo is not None:
        return "demo"
    if args.prompt_file is not None:
        return args.prompt_file.stem
    return "inline"


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_init_model(args) -> int:
    seed = _seed(args)
    if seed is None:
        raise UsageError("init-model needs --seed")
    config = _model_config(args)
    weights = init_random(config, seed)
    save_weights(weights, args.out)
    dims = " ".join(f"{k}={v}" for k, v in asdict(config).items())
    print(f"wrote {args.out}: {dims} seed={seed}")
    return EXIT_OK


def cmd_generate(args) -> int:
    weights = _load_model(args)
    prompts = _prompts(args, weights.config.d_vocab)
    if not 0 <= args.prompt_index < len(prompts):
        raise UsageError(f"--prompt-index {args.prompt_index} outside [0, {len(prompts)})")
    policy = _policy(args)
    result = generate(weights, prompts[args.prompt_index], policy, args.mode, end_token=args.end_token)
    if args.out is not None:
        args.out.write_text(_dumps(result.to_dict(weights.config)))
    print("tokens: " + " ".join(str(t) for t in result.tokens))
    print(
        f"summary: tokens={len(result.tokens)} avg_exit={result.avg_exit:.4f} "
        f"flops_per_token={result.flops_per_token:.1f} conf_time_s={result.timing.confidence_s:.6f}"
    )
    return EXIT_OK


def bench_rows(weights, prompts, args) -> list[dict]:
    rows = []
    dataset = _dataset_label(args)
    for lam in args.lambdas:
        policy = _policy(args, lam)
        runs = {}
        for mode in (Mode.FULL, Mode.DVP):
            runs[mode] = [generate(weights, p, policy, mode, end_token=args.end_token) for p in prompts]
        for mode in (Mode.FULL, Mode.DVP):
            results = runs[mode]
            n_tokens = sum(len(r.tokens) for r in results)
            score = float(np.mean([
                analysis.prefix_agreement(ref.tokens, r.tokens)
                for ref, r in zip(runs[Mode.FULL], results)
            ]))
            exits = [e for r in results for e in r.exit_layers]
            rows.append({
                "dataset": dataset,
                "mode": mode.value,
                "lambda": lam,
                "score": score,
                "flops_per_token": sum(r.ledger.total for r in results) / max(n_tokens, 1),
                "avg_exit": sum(exits) / max(len(exits), 1),
                "conf_time_s": None if args.no_timing else sum(r.timing.confidence_s for r in results),
            })
    return rows


def cmd_bench(args) -> int:
    weights = _load_model(args)
    prompts = _prompts(args, weights.config.d_vocab)
    rows = bench_rows(weights, prompts, args)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({
            "dataset": row["dataset"],
            "mode": row["mode"],
            "lambda": f"{row['lambda']:g}",
            "score": f"{row['score']:.6f}",
            "flops_per_token": f"{row['flops_per_token']:.1f}",
            "avg_exit": f"{row['avg_exit']:.6f}",
            "conf_time_s": "" if row["conf_time_s"] is None else f"{row['conf_time_s']:.6f}",
        })
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_rank_analyze(args) -> int:
    weights = _load_model(args)
    prompts = _prompts(args, weights.config.d_vocab)
    traces = [analysis.rank_trace(weights, p, args.N) for p in prompts]
    summary = analysis.rank_summary(traces, args.ks)
    _emit(summary.to_csv(), args.out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    weights = _load_model(args)
    prompts = _prompts(args, weights.config.d_vocab)
    if args.grid is not None:
        if args.ps is not None or args.Ks is not None:
            raise UsageError("use either --grid or --ps/--Ks, not both")
        grid = args.grid
    elif args.ps is not None and args.Ks is not None:
        grid = [(p, k) for p in args.ps for k in args.Ks]
    else:
        raise UsageError("calibrate needs --grid or both --ps and --Ks")
    template = _policy(args)
    report = analysis.calibrate(weights, prompts, grid, args.epsilon, template)
    if args.exhaustive_check:
        expected = analysis.calibrate_exhaustive(weights, prompts, grid, args.epsilon, template)
        if tuple(report.chosen_point) != tuple(expected):
            raise NumericError(
                f"exhaustive check failed: calibrate chose {report.chosen_point}, "
                f"exhaustive search chose {expected}"
            )
        print(f"exhaustive-check: ok {expected}", file=sys.stderr)
    _emit(report.to_json(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _kind(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, (UsageError, InvalidInputError, argparse.ArgumentTypeError)):
        return "usage", EXIT_USAGE
    if isinstance(exc, (WeightFormatError, OSError)):
        return "io", EXIT_IO
    if isinstance(exc, (CapacityError, NumericError, EevoError)):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return "usage", EXIT_USAGE
    return "internal", EXIT_NUMERIC


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (EevoError, OSError, ValueError, argparse.ArgumentTypeError) as exc:
        kind, code = _kind(exc)
        message = " ".join(str(exc).split())
        print(f"eevo: error[{kind}]: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
