"""Lambda sweeps over seeds, and the analyses run on their results.

A sweep directory looks like::

    plan.json
    cells/lambda=0.001_seed=42/{run.json, metrics.jsonl, checkpoint.bin}
    sweep.csv            one row per finished cell
    failures.csv         one row per failed cell

``run.json`` is written last, so its presence (with ``status == "ok"``) marks a
cell as done and lets an interrupted sweep resume.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .data import DEFAULT_VAL_FRACTION, Corpus, load_corpus
from .metrics import GapOracleReport, gap_oracle
from .model import MoEModelConfig
from .stats import (CorrelationResult, DegenerateTestError, PairedTestResult, SampleSizeError,
                    UndefinedCorrelationError, paired_t_test, pearson, percent_change, summarize)
from .train import MetricsRecord, TrainConfig, run_training

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.2)
DEFAULT_SEEDS = (42, 123, 456, 789, 1337)
OUTPUT_ROOT_ENV = "MOEGAP_OUTPUT_ROOT"
SCHEMA_VERSION = "moegap-sweep/1"
RUN_FILE = "run.json"
COMPARISON_METRICS = ("val_loss", "val_ppl")


class AnalysisScopeError(ValueError):
    def __init__(self, message: str, computable: list[str], missing: dict[str, str]):
        super().__init__(message)
        self.computable = computable
        self.missing = missing


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_output(path=None, default_name: str = "run") -> Path:
    """Absolute paths pass through; relative ones land under the output root."""
    if path is None:
        return output_root() / default_name
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


def fmt_float(x) -> str:
    """Shortest text that round-trips a float exactly; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(f"# schema: {SCHEMA_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt_float(v) if isinstance(v, float) or v is None else v for v in row])
    path.write_text(buf.getvalue())


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader.fieldnames or []), list(reader)


# -- plan ----------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    model_cfg: MoEModelConfig = field(default_factory=MoEModelConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("runs/sweep")
    corpus_path: str | None = None
    split_ratio: float = DEFAULT_VAL_FRACTION

    def __post_init__(self):
        self.lambda_grid = tuple(float(x) for x in self.lambda_grid)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.output_dir = Path(self.output_dir)
        if not self.lambda_grid or not self.seeds:
            raise ValueError("plan needs at least one lambda and one seed")
        if any(x < 0 or not math.isfinite(x) for x in self.lambda_grid):
            raise ValueError("lambda values must be finite and non-negative")
        if len(set(self.lambda_grid)) != len(self.lambda_grid):
            raise ValueError("lambda values must be distinct")
        if len(set(self.seeds)) != len(self.seeds) or any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be distinct unsigned integers")

    def cells(self) -> list[tuple[float, int]]:
        return [(lam, seed) for lam in self.lambda_grid for seed in self.seeds]

    def cell_dir(self, lam: float, seed: int) -> Path:
        return self.output_dir / "cells" / f"lambda={lam!r}_seed={seed}"

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "lambda_grid": list(self.lambda_grid),
            "seeds": list(self.seeds),
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.train_cfg.to_dict(),
            "corpus_path": self.corpus_path,
            "split_ratio": self.split_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict, output_dir) -> ExperimentPlan:
        return cls(tuple(d["lambda_grid"]), tuple(d["seeds"]),
                   MoEModelConfig.from_dict(d["model_config"]),
                   TrainConfig.from_dict(d["train_config"]), Path(output_dir),
                   d.get("corpus_path"), d.get("split_ratio", DEFAULT_VAL_FRACTION))

    def load_corpus(self) -> Corpus:
        return load_corpus(self.corpus_path, self.split_ratio)


# -- cells -----------------------------------------------------------------------

@dataclass
class CellResult:
    lam: float
    seed: int
    status: str
    final: MetricsRecord | None = None
    failure: str | None = None
    metadata: dict = field(default_factory=dict)
    resumed: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_metadata(model_cfg: MoEModelConfig, train_cfg: TrainConfig, corpus: Corpus) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "model_config": model_cfg.replace(seed=train_cfg.seed).to_dict(),
        "train_config": train_cfg.to_dict(),
        "corpus": corpus.info(),
        "evaluation": {
            "split": "validation",
            "tokens": train_cfg.eval_tokens,
            "window": train_cfg.seq_len,
            "activation_mso": "per-token mean over selected-expert pairs, outputs before gate scaling",
        },
        "lr_schedule": {"kind": train_cfg.lr_schedule, "warmup_iters": train_cfg.warmup_iters},
        "aux_load_balancing_loss": False,
    }


def _load_cell(path: Path) -> CellResult:
    meta = json.loads(path.read_text())
    final = MetricsRecord.from_dict(meta["final"]) if meta.get("final") else None
    return CellResult(float(meta["lambda"]), int(meta["seed"]), meta["status"], final,
                      meta.get("failure"), meta, resumed=True)


def run_cell(plan: ExperimentPlan, lam: float, seed: int, corpus: Corpus | None = None) -> CellResult:
    """Train one (lambda, seed) cell unless a successful ``run.json`` already exists."""
    out = plan.cell_dir(lam, seed)
    meta_path = out / RUN_FILE
    if meta_path.exists():
        cell = _load_cell(meta_path)
        if cell.ok:
            return cell
    corpus = corpus if corpus is not None else plan.load_corpus()
    train_cfg = plan.train_cfg.replace(lam=lam, seed=seed)
    meta = run_metadata(plan.model_cfg, train_cfg, corpus)
    meta.update({"lambda": lam, "seed": seed})
    started = time.perf_counter()
    try:
        result = run_training(plan.model_cfg, train_cfg, corpus, out_dir=out)
        final, status, failure = result.records[-1], "ok", None
        n_records = len(result.records)
    except Exception as exc:  # recorded and carried in the sweep, never dropped
        log.exception("cell lambda=%r seed=%d failed", lam, seed)
        final, status, failure, n_records = None, "failed", f"{type(exc).__name__}: {exc}", 0
    meta.update({"status": status, "failure": failure, "n_records": n_records,
                 "wall_time_s": time.perf_counter() - started,
                 "final": final.to_dict() if final else None})
    out.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return CellResult(lam, seed, status, final, failure, meta)


def _cell_job(plan_dict: dict, output_dir: str, lam: float, seed: int) -> CellResult:
    return run_cell(ExperimentPlan.from_dict(plan_dict, output_dir), lam, seed)


# -- sweep ---------------------------------------------------------------------

@dataclass
class SweepResult:
    plan: ExperimentPlan
    cells: list[CellResult]

    @property
    def ok_cells(self) -> list[CellResult]:
        return [c for c in self.cells if c.ok]

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if not c.ok]

    @property
    def executed(self) -> int:
        return sum(1 for c in self.cells if not c.resumed)

    @property
    def n_layers(self) -> int:
        return max((len(c.final.per_layer_weight_mso) for c in self.ok_cells), default=0)

    def csv_header(self) -> list[str]:
        n = self.n_layers
        return (["lambda", "seed", "step", "train_loss", "val_loss", "val_ppl", "orth_loss",
                 "mean_weight_mso", "mean_activation_mso", "gap_ratio"]
                + [f"weight_mso_l{i}" for i in range(n)]
                + [f"activation_mso_l{i}" for i in range(n)]
                + ["skipped_pairs", "total_pairs"])

    def csv_rows(self) -> list[list]:
        rows = []
        for c in self.ok_cells:
            r = c.final
            rows.append([float(c.lam), str(c.seed), str(r.step), r.train_loss, r.val_loss,
                         math.exp(r.val_loss), r.orth_loss, r.mean_weight_mso,
                         r.mean_activation_mso, r.gap_ratio,
                         *map(float, r.per_layer_weight_mso), *map(float, r.per_layer_activation_mso),
                         str(r.skipped_pairs), str(r.total_pairs)])
        return rows

    def write(self, out_dir=None) -> Path:
        out = Path(out_dir) if out_dir is not None else self.plan.output_dir
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "sweep.csv", self.csv_header(), self.csv_rows())
        _write_csv(out / "failures.csv", ["lambda", "seed", "failure"],
                   [[float(c.lam), str(c.seed), c.failure or ""] for c in self.failures])
        return out / "sweep.csv"


def run_sweep(plan: ExperimentPlan, workers: int = 1,
              progress: Callable[[CellResult], None] | None = None) -> SweepResult:
    """Run every planned cell (skipping finished ones) and write the consolidated CSV.

    Cells run in a bounded process pool when ``workers > 1``; results are
    always merged in plan order.
    """
    out = plan.output_dir
    out.mkdir(parents=True, exist_ok=True)
    plan_path = out / "plan.json"
    plan_text = json.dumps(plan.to_dict(), indent=2, sort_keys=True)
    if plan_path.exists() and json.loads(plan_path.read_text()) != plan.to_dict():
        raise ValueError(f"{plan_path} describes a different plan; use a fresh output directory")
    plan_path.write_text(plan_text)

    todo = []
    done: dict[tuple[float, int], CellResult] = {}
    for lam, seed in plan.cells():
        meta = plan.cell_dir(lam, seed) / RUN_FILE
        cell = _load_cell(meta) if meta.exists() else None
        if cell is not None and cell.ok:
            done[(lam, seed)] = cell
        else:
            todo.append((lam, seed))

    if todo and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_cell_job, plan.to_dict(), str(out), lam, seed): (lam, seed)
                       for lam, seed in todo}
            for fut, key in futures.items():
                done[key] = fut.result()
                if progress:
                    progress(done[key])
    elif todo:
        corpus = plan.load_corpus()
        for lam, seed in todo:
            done[(lam, seed)] = run_cell(plan, lam, seed, corpus)
            if progress:
                progress(done[(lam, seed)])

    result = SweepResult(plan, [done[key] for key in plan.cells()])
    result.write()
    return result


def load_sweep(output_dir) -> SweepResult:
    output_dir = Path(output_dir)
    plan = ExperimentPlan.from_dict(json.loads((output_dir / "plan.json").read_text()), output_dir)
    cells = []
    for lam, seed in plan.cells():
        meta = plan.cell_dir(lam, seed) / RUN_FILE
        if meta.exists():
            cells.append(_load_cell(meta))
        else:
            cells.append(CellResult(lam, seed, "missing", failure="cell has not been run", resumed=True))
    return SweepResult(plan, cells)


# -- analysis --------------------------------------------------------------------

@dataclass
class GapRow:
    lam: float
    n_seeds: int
    weight_mso: float
    activation_mso: float
    ratio: float
    weight_mso_delta_pct: float | None


@dataclass
class LayerGapRow:
    lam: float
    layer: int
    weight_mso: float
    activation_mso: float
    ratio: float


@dataclass
class Comparison:
    metric: str
    baseline_lambda: float
    treatment_lambda: float
    seeds: list[int]
    baseline_mean: float
    baseline_std: float | None
    treatment_mean: float
    treatment_std: float | None
    delta_pct: float
    test: PairedTestResult

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "test"}
        d["test"] = self.test.to_dict()
        return d


@dataclass
class AnalysisBundle:
    gap_table: list[GapRow]
    correlation: CorrelationResult | None
    comparisons: dict[str, Comparison]
    layer_gaps: list[LayerGapRow]
    skipped: dict[str, str]
    files: dict[str, Path] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gap_table": [r.__dict__ for r in self.gap_table],
            "correlation": self.correlation.to_dict() if self.correlation else None,
            "comparisons": {k: c.to_dict() for k, c in self.comparisons.items()},
            "layer_gaps": [r.__dict__ for r in self.layer_gaps],
            "skipped": self.skipped,
        }


def _ratio(a: float, w: float) -> float:
    return a / w if w > 0 else math.inf


def gap_table(cells: Sequence[CellResult], grid: Sequence[float]) -> list[GapRow]:
    rows = []
    baseline = None
    for lam in grid:
        group = [c.final for c in cells if c.ok and c.lam == lam]
        if not group:
            continue
        w = float(np.mean([r.mean_weight_mso for r in group]))
        a = float(np.mean([r.mean_activation_mso for r in group]))
        if lam == 0.0:
            baseline = w
        rows.append(GapRow(lam, len(group), w, a, _ratio(a, w), None))
    if baseline is not None:
        for row in rows:
            row.weight_mso_delta_pct = percent_change(baseline, row.weight_mso)
    return rows


def layer_gap_table(cells: Sequence[CellResult], grid: Sequence[float]) -> list[LayerGapRow]:
    rows = []
    for lam in grid:
        group = [c.final for c in cells if c.ok and c.lam == lam]
        if not group:
            continue
        w = np.mean([r.per_layer_weight_mso for r in group], axis=0)
        a = np.mean([r.per_layer_activation_mso for r in group], axis=0)
        rows.extend(LayerGapRow(lam, i, float(wi), float(ai), _ratio(float(ai), float(wi)))
                    for i, (wi, ai) in enumerate(zip(w, a)))
    return rows


def compare_lambdas(cells: Sequence[CellResult], baseline: float, treatment: float,
                    metric: str = "val_loss") -> Comparison:
    """Seed-paired comparison of validation loss or perplexity between two lambdas."""
    def value(r: MetricsRecord) -> float:
        return math.exp(r.val_loss) if metric == "val_ppl" else r.val_loss

    base = {c.seed: value(c.final) for c in cells if c.ok and c.lam == baseline}
    treat = {c.seed: value(c.final) for c in cells if c.ok and c.lam == treatment}
    seeds = sorted(set(base) & set(treat))
    if len(seeds) < 2:
        raise SampleSizeError(f"need >= 2 seeds run at both lambda={baseline} and "
                              f"lambda={treatment}, found {len(seeds)}")
    b = [base[s] for s in seeds]
    t = [treat[s] for s in seeds]
    sb, st = summarize(b), summarize(t)
    return Comparison(metric, baseline, treatment, seeds, sb.mean, sb.std, st.mean, st.std,
                      percent_change(sb.mean, st.mean), paired_t_test(t, b))


def analyze_sweep(result: SweepResult, out_dir=None, baseline_lambda: float = 0.0,
                  treatment_lambda: float = 0.001, figures: bool = True,
                  strict: bool = False) -> AnalysisBundle:
    """Gap table, weight/activation correlation, seed-paired comparison, per-layer gaps.

    Sections whose inputs are missing are skipped with a reason; ``strict``
    turns any skip into :class:`AnalysisScopeError`.
    """
    cells = result.ok_cells
    grid = result.plan.lambda_grid
    skipped: dict[str, str] = {}

    table = gap_table(cells, grid)
    if not table:
        skipped["gap_table"] = "no finished cells"

    correlation = None
    if len(table) < 3:
        skipped["correlation"] = f"no correlation computable: need >= 3 lambda values, have {len(table)}"
    else:
        try:
            correlation = pearson([r.weight_mso for r in table], [r.activation_mso for r in table])
        except (UndefinedCorrelationError, SampleSizeError) as exc:
            skipped["correlation"] = f"no correlation computable: {exc}"

    comparisons: dict[str, Comparison] = {}
    for metric in COMPARISON_METRICS:
        try:
            comparisons[metric] = compare_lambdas(cells, baseline_lambda, treatment_lambda, metric)
        except (SampleSizeError, DegenerateTestError) as exc:
            skipped["comparison"] = f"no comparison computable: {exc}"
            comparisons = {}
            break

    layers = layer_gap_table(cells, grid)
    if not layers:
        skipped["layer_gaps"] = "no finished cells"

    if strict and skipped:
        computable = [s for s in ("gap_table", "correlation", "comparison", "layer_gaps")
                      if s not in skipped]
        raise AnalysisScopeError("analysis incomplete: " + "; ".join(f"{k}: {v}" for k, v in skipped.items()),
                                 computable, skipped)
    if not table and not layers:
        raise AnalysisScopeError("nothing to analyze: the sweep has no finished cells", [], skipped)

    bundle = AnalysisBundle(table, correlation, comparisons, layers, skipped)
    if out_dir is not None:
        write_analysis(bundle, Path(out_dir), figures)
    return bundle


def write_analysis(bundle: AnalysisBundle, out: Path, figures: bool = True) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = bundle.files
    files["gap_table"] = out / "gap_table.csv"
    _write_csv(files["gap_table"],
               ["lambda", "n_seeds", "weight_mso", "activation_mso", "ratio", "weight_mso_delta_pct"],
               [[r.lam, str(r.n_seeds), r.weight_mso, r.activation_mso, r.ratio, r.weight_mso_delta_pct]
                for r in bundle.gap_table])
    files["layer_gaps"] = out / "layer_gaps.csv"
    _write_csv(files["layer_gaps"], ["lambda", "layer", "weight_mso", "activation_mso", "ratio"],
               [[r.lam, str(r.layer), r.weight_mso, r.activation_mso, r.ratio] for r in bundle.layer_gaps])
    rows = []
    for c in bundle.comparisons.values():
        rows.append([c.metric, "baseline", c.baseline_lambda, str(len(c.seeds)), c.baseline_mean,
                     c.baseline_std, None, None, None])
        rows.append([c.metric, "orth", c.treatment_lambda, str(len(c.seeds)), c.treatment_mean,
                     c.treatment_std, c.delta_pct, c.test.t_statistic, c.test.p_two_sided])
    files["comparison"] = out / "comparison.csv"
    _write_csv(files["comparison"], ["metric", "method", "lambda", "n", "mean", "std", "delta_pct",
                                     "t_statistic", "p_value"], rows)
    files["gap_series"] = out / "gap_series.dat"
    lines = ["# lambda weight_mso activation_mso"]
    lines += [f"{fmt_float(r.lam)} {fmt_float(r.weight_mso)} {fmt_float(r.activation_mso)}"
              for r in bundle.gap_table]
    files["gap_series"].write_text("\n".join(lines) + "\n")
    files["analysis"] = out / "analysis.json"
    files["analysis"].write_text(json.dumps(_json_ready(bundle.to_dict()), indent=2, sort_keys=True))

    if figures:
        try:
            from . import plotting
        except ImportError as exc:  # matplotlib is an optional extra
            log.warning("figures skipped: %s", exc)
        else:
            if bundle.gap_table:
                files["gap_figure"] = plotting.plot_gap_series(bundle.gap_table, bundle.correlation,
                                                               out / "gap_figure.png")
            if bundle.layer_gaps:
                files["layer_figure"] = plotting.plot_layer_gaps(bundle.layer_gaps, out / "layer_gaps.png")
    return files


def _json_ready(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    return obj


# -- gap demonstration -----------------------------------------------------------

def gap_demo_text(report: GapOracleReport) -> str:
    tz, ann = report.trace_zero, report.annihilated
    rows = [
        ("", "trace-zero", "W1^T W2 = 0"),
        ("flattened cosine", f"{tz.flattened_inner:+.3e}", f"{ann.flattened_inner:+.3e}"),
        ("tr(W1^T W2)", f"{tz.trace:+.3e}", f"{ann.trace:+.3e}"),
        ("|W1^T W2|_F", f"{tz.cross_norm:.3e}", f"{ann.cross_norm:.3e}"),
        ("mean cos^2", f"{tz.mean_sq_cos:.4f}", f"{ann.mean_sq_cos:.4f}"),
        ("mean |cos|", f"{tz.mean_abs_cos:.4f}", f"{ann.mean_abs_cos:.4f}"),
        ("median |cos|", f"{tz.median_abs_cos:.4f}", f"{ann.median_abs_cos:.4f}"),
        ("95th pct |cos|", f"{tz.q95_abs_cos:.4f}", f"{ann.q95_abs_cos:.4f}"),
        ("max |cos|", f"{tz.max_abs_cos:.4f}", f"{ann.max_abs_cos:.4f}"),
    ]
    width = max(len(r[0]) for r in rows)
    lines = [f"activation cosines of W1 x and W2 x over {report.trials} Gaussian inputs "
             f"(d_model={report.d_model}, d_ffn={report.d_ffn}, seed={report.seed})"]
    lines += [f"{a:<{width}}  {b:>12}  {c:>12}" for a, b, c in rows]
    verdict = "holds" if report.gap_demonstrated else "NOT shown"
    lines.append(f"gap {verdict}: zero flattened inner product, mean cos^2 "
                 f"{tz.mean_sq_cos:.4f} vs floor {report.floor}")
    return "\n".join(lines)


def run_gap_demo(d_model: int = 32, d_ffn: int = 32, trials: int = 10_000, seed: int = 0,
                 out_dir=None, figures: bool = True) -> tuple[GapOracleReport, str]:
    report = gap_oracle(d_model, d_ffn, trials, seed)
    text = gap_demo_text(report)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gap_demo.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        (out / "gap_demo.txt").write_text(text + "\n")
        _write_csv(out / "gap_demo_cosines.csv", ["trial", "abs_cos_trace_zero", "abs_cos_annihilated"],
                   [[str(i), float(a), float(b)] for i, (a, b)
                    in enumerate(zip(report.trace_zero.abs_cos, report.annihilated.abs_cos))])
        if figures:
            try:
                from . import plotting
            except ImportError as exc:
                log.warning("figure skipped: %s", exc)
            else:
                plotting.plot_gap_demo(report, out / "gap_demo.png")
    return report, text
