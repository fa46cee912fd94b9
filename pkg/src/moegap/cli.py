"""Command-line entry point: ``moegap {train,sweep,analyze,gap-demo,corpus-info}``.

Relative ``--out`` paths are placed under ``$MOEGAP_OUTPUT_ROOT`` (default
``./runs``).  Every subcommand that produces results writes ``run.json``
with the fully resolved configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
import typing
from pathlib import Path

from . import __version__
from .data import DEFAULT_VAL_FRACTION, CorpusError, load_corpus
from .harness import (DEFAULT_LAMBDA_GRID, DEFAULT_SEEDS, AnalysisScopeError, ExperimentPlan,
                      analyze_sweep, load_sweep, resolve_output, run_gap_demo, run_metadata, run_sweep)
from .model import ConfigError, MoEModelConfig
from .train import TrainConfig, TrainingDivergedError, run_training

# train-config fields whose flag name differs from the field name
FLAG_NAMES = {"lam": "lambda"}
SKIP_FIELDS = {"seed"}  # the train seed also seeds model init


def _field_type(cls, f: dataclasses.Field):
    hint = typing.get_type_hints(cls)[f.name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return args[0] if args else hint


def add_config_flags(parser: argparse.ArgumentParser, cls, group_name: str, skip=()) -> None:
    group = parser.add_argument_group(group_name)
    for f in dataclasses.fields(cls):
        if f.name in SKIP_FIELDS or f.name in skip:
            continue
        flag = "--" + FLAG_NAMES.get(f.name, f.name).replace("_", "-")
        typ = _field_type(cls, f)
        if typ is bool:
            group.add_argument(flag, dest=f"{cls.__name__}.{f.name}",
                               action=argparse.BooleanOptionalAction, default=None,
                               help=f"(default: {f.default})")
        else:
            group.add_argument(flag, dest=f"{cls.__name__}.{f.name}", type=typ, default=None,
                               metavar=typ.__name__.upper(), help=f"(default: {f.default})")


def config_from_args(args: argparse.Namespace, cls, **extra):
    prefix = cls.__name__ + "."
    values = {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}
    values.update(extra)
    return cls(**values)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moegap", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def corpus_flags(p):
        p.add_argument("--corpus", type=Path, default=None, help="text file (default: bundled corpus)")
        p.add_argument("--split-ratio", type=float, default=DEFAULT_VAL_FRACTION,
                       help="trailing fraction held out for validation")

    p = sub.add_parser("train", help="train one model and record overlap metrics")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--no-orth-term", action="store_true",
                   help="never build the orthogonality term (only valid with --lambda 0)")
    corpus_flags(p)
    add_config_flags(p, MoEModelConfig, "model")
    add_config_flags(p, TrainConfig, "training")

    p = sub.add_parser("sweep", help="train every (lambda, seed) cell of a plan")
    p.add_argument("--out", default="sweep", help="sweep directory")
    p.add_argument("--lambdas", type=_float_list, default=DEFAULT_LAMBDA_GRID,
                   help="comma-separated lambda grid")
    p.add_argument("--seeds", type=_int_list, default=DEFAULT_SEEDS, help="comma-separated seeds")
    p.add_argument("--workers", type=int, default=1, help="parallel cells")
    corpus_flags(p)
    add_config_flags(p, MoEModelConfig, "model")
    add_config_flags(p, TrainConfig, "training", skip={"lam"})

    p = sub.add_parser("analyze", help="tables, correlation, comparison and figures for a sweep")
    p.add_argument("sweep_dir", help="directory written by 'moegap sweep'")
    p.add_argument("--out", default=None, help="report directory (default: <sweep_dir>/analysis)")
    p.add_argument("--baseline-lambda", type=float, default=0.0)
    p.add_argument("--treatment-lambda", type=float, default=0.001)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--strict", action="store_true", help="fail if any section cannot be computed")

    p = sub.add_parser("gap-demo", help="trace-zero versus annihilating weight pairs")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--d-ffn", type=int, default=32)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="gap-demo")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--json", action="store_true", help="print JSON instead of the text table")

    p = sub.add_parser("corpus-info", help="describe the corpus and its split")
    corpus_flags(p)
    return ap


def _write_run_json(out: Path, payload: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    return path


def cmd_train(args) -> int:
    model_cfg = config_from_args(args, MoEModelConfig)
    train_cfg = config_from_args(args, TrainConfig, seed=args.seed)
    if args.no_orth_term and train_cfg.lam != 0.0:
        raise ConfigError("--no-orth-term requires --lambda 0")
    corpus = load_corpus(args.corpus, args.split_ratio)
    out = resolve_output(args.out, f"train-lambda={train_cfg.lam!r}_seed={train_cfg.seed}")
    meta = run_metadata(model_cfg, train_cfg, corpus)
    meta.update({"command": "train", "build_orth": not args.no_orth_term, "status": "running"})
    _write_run_json(out, meta)

    def progress(r):
        print(f"step {r.step:6d}  val {r.val_loss:.4f}  orth {r.orth_loss:.3e}  "
              f"wMSO {r.mean_weight_mso:.3e}  aMSO {r.mean_activation_mso:.4f}  "
              f"ratio {r.gap_ratio:.1f}", flush=True)

    started = time.perf_counter()
    try:
        result = run_training(model_cfg, train_cfg, corpus, out, not args.no_orth_term, progress)
    except TrainingDivergedError as exc:
        meta.update(status="diverged", failure=str(exc), wall_time_s=time.perf_counter() - started)
        _write_run_json(out, meta)
        print(f"error: {exc} (diagnostics in {out})", file=sys.stderr)
        return 3
    final = result.records[-1]
    meta.update(status="ok", failure=None, wall_time_s=result.wall_time, final=final.to_dict())
    _write_run_json(out, meta)
    print(f"final val loss {final.val_loss:.4f} (ppl {math.exp(final.val_loss):.3f}); "
          f"activation/weight MSO ratio {final.gap_ratio:.1f}")
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    model_cfg = config_from_args(args, MoEModelConfig)
    train_cfg = config_from_args(args, TrainConfig)
    out = resolve_output(args.out, "sweep")
    plan = ExperimentPlan(args.lambdas, args.seeds, model_cfg, train_cfg, out,
                          str(args.corpus) if args.corpus else None, args.split_ratio)

    def progress(cell):
        tail = f"ratio {cell.final.gap_ratio:.1f}" if cell.ok else cell.failure
        print(f"lambda={cell.lam!r} seed={cell.seed}: {cell.status}  {tail}", flush=True)

    result = run_sweep(plan, workers=args.workers, progress=progress)
    print(f"{len(result.ok_cells)} ok, {len(result.failures)} failed, "
          f"{result.executed} trained this call; wrote {out / 'sweep.csv'}")
    return 0 if not result.failures else 4


def cmd_analyze(args) -> int:
    sweep_dir = resolve_output(args.sweep_dir)
    result = load_sweep(sweep_dir)
    out = Path(args.out) if args.out else sweep_dir / "analysis"
    try:
        bundle = analyze_sweep(result, out, args.baseline_lambda, args.treatment_lambda,
                               figures=not args.no_figures, strict=args.strict)
    except AnalysisScopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"computable: {', '.join(exc.computable) or 'nothing'}", file=sys.stderr)
        return 2
    _write_run_json(out, {"command": "analyze", "sweep_dir": str(sweep_dir),
                          "baseline_lambda": args.baseline_lambda,
                          "treatment_lambda": args.treatment_lambda, "code_version": __version__,
                          "files": {k: str(v) for k, v in bundle.files.items()}})
    print("lambda      n  weight_mso   activation_mso  ratio")
    for r in bundle.gap_table:
        print(f"{r.lam:<10g} {r.n_seeds:2d}  {r.weight_mso:.4e}  {r.activation_mso:.4e}     {r.ratio:.1f}")
    if bundle.correlation:
        c = bundle.correlation
        ci = "" if c.ci95_low is None else f", 95% CI [{c.ci95_low:.3f}, {c.ci95_high:.3f}]"
        print(f"correlation r = {c.r:.3f}, p = {c.p_two_sided:.3f}, n = {c.n}{ci}")
    for c in bundle.comparisons.values():
        print(f"{c.metric}: baseline {c.baseline_mean:.4f} vs lambda={c.treatment_lambda:g} "
              f"{c.treatment_mean:.4f} ({c.delta_pct:+.2f}%), paired p = {c.test.p_two_sided:.3f}")
    for section, reason in bundle.skipped.items():
        print(f"{section}: {reason}")
    print(f"wrote {out}")
    return 0


def cmd_gap_demo(args) -> int:
    out = resolve_output(args.out, "gap-demo")
    report, text = run_gap_demo(args.d_model, args.d_ffn, args.trials, args.seed, out,
                                figures=not args.no_figures)
    _write_run_json(out, {"command": "gap-demo", "d_model": args.d_model, "d_ffn": args.d_ffn,
                          "trials": args.trials, "seed": args.seed, "code_version": __version__})
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True) if args.json else text)
    return 0 if report.gap_demonstrated else 1


def cmd_corpus_info(args) -> int:
    print(json.dumps(load_corpus(args.corpus, args.split_ratio).info(), indent=2, sort_keys=True))
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "analyze": cmd_analyze,
            "gap-demo": cmd_gap_demo, "corpus-info": cmd_corpus_info}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CorpusError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
