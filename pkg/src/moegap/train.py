"""AdamW training loop for the MoE language model with an optional overlap penalty."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Corpus, eval_windows, sample_batch
from .metrics import OverlapReport, activation_mso, orthogonality_loss, weight_mso_per_layer
from .model import MoEModel, MoEModelConfig
from .rng import substream

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
DIAGNOSTIC_FILE = "diagnostic.json"


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    iterations: int = 2000
    batch_size: int = 16
    seq_len: int = 128
    lam: float = 0.0
    seed: int = 42
    eval_interval: int = 200
    eval_tokens: int = 8192
    grad_clip: float | None = None
    lr_schedule: str = "constant"
    warmup_iters: int = 0
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lambda must be non-negative")
        for name in ("iterations", "batch_size", "seq_len", "eval_interval", "eval_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def lr_at(self, step: int) -> float:
        """Learning rate for the update that takes parameters from ``step`` to ``step + 1``."""
        if self.warmup_iters and step < self.warmup_iters:
            return self.lr * (step + 1) / self.warmup_iters
        if self.lr_schedule == "constant":
            return self.lr
        span = max(1, self.iterations - self.warmup_iters)
        progress = min(1.0, (step - self.warmup_iters) / span)
        floor = self.lr * self.min_lr_ratio
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied only to the flagged parameters."""

    def __init__(self, params, decay_mask, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1):
        self.params = list(params)
        self.decay = list(decay_mask)
        if len(self.decay) != len(self.params):
            raise ValueError("decay_mask must have one entry per parameter")
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, decay, m, v in zip(self.params, self.decay, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def decay_mask(model: MoEModel) -> list[bool]:
    # matrices and embeddings decay; LayerNorm gains and biases do not
    return [p.ndim >= 2 for p in model.parameters()]


def make_optimizer(model: MoEModel, cfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), decay_mask(model), cfg.beta1, cfg.beta2,
                 cfg.adam_eps, cfg.weight_decay)


def clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class StepResult:
    lm_loss: float
    orth_loss: float | None


def train_step(model: MoEModel, optimizer: AdamW, batch, lam: float, lr: float,
               grad_clip: float | None = None, build_orth: bool = True) -> StepResult:
    """One update on ``lm_loss + lam * orth_loss``.

    With ``build_orth=False`` the penalty is never put on the tape at all; for
    ``lam == 0`` both paths must produce identical parameters.
    """
    inputs, targets = batch
    model.zero_grad()
    lm = model.loss(inputs, targets)
    total, orth_value = lm, None
    if build_orth:
        orth = orthogonality_loss(model.expert_up_weights())
        orth_value = orth.item()
        total = T.add(lm, T.scale(orth, lam))
    if not total.all_finite():
        raise TrainingDivergedError(
            "non-finite loss", {"lm_loss": lm.item(), "orth_loss": orth_value, "lambda": lam})
    T.backward(total)
    if grad_clip is not None:
        clip_gradients(model.parameters(), grad_clip)
    optimizer.step(lr)
    return StepResult(lm.item(), orth_value)


@dataclass
class MetricsRecord:
    step: int
    train_loss: float | None
    val_loss: float
    orth_loss: float
    per_layer_weight_mso: list[float]
    per_layer_activation_mso: list[float]
    mean_weight_mso: float
    mean_activation_mso: float
    gap_ratio: float
    per_layer_gap_ratio: list[float] = field(default_factory=list)
    skipped_pairs: int = 0
    total_pairs: int = 0
    lr: float = 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsRecord:
        d = dict(d)
        for key in ("gap_ratio",):
            if d.get(key) is None:
                d[key] = math.inf
        d["per_layer_gap_ratio"] = [math.inf if v is None else v for v in d.get("per_layer_gap_ratio", [])]
        return cls(**d)

    @property
    def overlap(self) -> OverlapReport:
        return OverlapReport(self.per_layer_weight_mso, self.per_layer_activation_mso,
                             self.mean_weight_mso, self.mean_activation_mso,
                             self.per_layer_gap_ratio, self.gap_ratio,
                             self.skipped_pairs, self.total_pairs)


def evaluate(model: MoEModel, val_tokens: np.ndarray, seq_len: int, eval_tokens: int,
             chunk: int = 16) -> tuple[float, OverlapReport]:
    """Validation loss and overlap report on a fixed head slice of the validation tokens."""
    inputs, targets = eval_windows(val_tokens, seq_len, eval_tokens)
    traces = []
    nll_sum = 0.0
    with T.no_grad():
        for start in range(0, len(inputs), chunk):
            x, y = inputs[start:start + chunk], targets[start:start + chunk]
            logits, layer_traces = model.forward(x, record_trace=True)
            nll_sum += T.cross_entropy(logits, y).item() * y.size
            traces.extend(layer_traces)
        per_layer_weight = weight_mso_per_layer(model.expert_up_weights())
    report = OverlapReport.build(per_layer_weight, activation_mso(traces))
    return nll_sum / targets.size, report


def snapshot(model: MoEModel, corpus: Corpus, cfg: TrainConfig, step: int,
             train_loss: float | None, lr: float) -> MetricsRecord:
    val_loss, report = evaluate(model, corpus.val_tokens, cfg.seq_len, cfg.eval_tokens)
    with T.no_grad():
        orth = orthogonality_loss(model.expert_up_weights()).item()
    return MetricsRecord(
        step=step, train_loss=train_loss, val_loss=val_loss, orth_loss=orth,
        per_layer_weight_mso=report.per_layer_weight_mso,
        per_layer_activation_mso=report.per_layer_activation_mso,
        mean_weight_mso=report.mean_weight_mso, mean_activation_mso=report.mean_activation_mso,
        gap_ratio=report.gap_ratio, per_layer_gap_ratio=report.per_layer_gap_ratio,
        skipped_pairs=report.skipped_pairs, total_pairs=report.total_pairs, lr=lr,
    )


@dataclass
class TrainingResult:
    records: list[MetricsRecord]
    model: MoEModel
    checkpoint: Path | None
    wall_time: float


def run_training(model_cfg: MoEModelConfig, train_cfg: TrainConfig, corpus: Corpus,
                 out_dir=None, build_orth: bool = True,
                 progress: Callable[[MetricsRecord], None] | None = None) -> TrainingResult:
    """Train from scratch; the train seed roots every random stream, including init.

    Records are emitted at step 0, every ``eval_interval`` steps and at the
    final step.  With ``out_dir`` set each record is appended to
    ``metrics.jsonl`` as it is produced and the final parameters go to
    ``checkpoint.bin``.
    """
    started = time.perf_counter()
    model_cfg = model_cfg.replace(seed=train_cfg.seed)
    if model_cfg.vocab_size < corpus.vocab_size:
        raise ValueError(f"model vocab {model_cfg.vocab_size} < corpus vocab {corpus.vocab_size}")
    model = MoEModel(model_cfg)
    optimizer = make_optimizer(model, train_cfg)
    data_rng = substream(train_cfg.seed, "data")

    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_FILE
        metrics_path.write_text("")

    records: list[MetricsRecord] = []

    def emit(record: MetricsRecord) -> None:
        records.append(record)
        if metrics_path is not None:
            try:
                with metrics_path.open("a") as fh:
                    fh.write(record.to_json() + "\n")
            except OSError as exc:
                raise OSError(f"writing {metrics_path} at step {record.step}: {exc}") from exc
        if progress is not None:
            progress(record)

    emit(snapshot(model, corpus, train_cfg, 0, None, train_cfg.lr_at(0)))
    window: list[float] = []
    for step in range(train_cfg.iterations):
        lr = train_cfg.lr_at(step)
        batch = sample_batch(corpus, train_cfg.batch_size, train_cfg.seq_len, data_rng)
        try:
            result = train_step(model, optimizer, batch, train_cfg.lam, lr,
                                train_cfg.grad_clip, build_orth)
        except TrainingDivergedError as exc:
            exc.snapshot.update(step=step, lr=lr, last_record=records[-1].to_dict())
            if out_dir is not None:
                (out_dir / DIAGNOSTIC_FILE).write_text(json.dumps(exc.snapshot, indent=2, default=str))
            raise
        window.append(result.lm_loss)
        done = step + 1
        if done % train_cfg.eval_interval == 0 or done == train_cfg.iterations:
            emit(snapshot(model, corpus, train_cfg, done, float(np.mean(window)), lr))
            log.info("step %d val %.4f wMSO %.3g aMSO %.3g", done, records[-1].val_loss,
                     records[-1].mean_weight_mso, records[-1].mean_activation_mso)
            window = []

    ckpt = save_checkpoint(out_dir / CHECKPOINT_FILE, model) if out_dir is not None else None
    return TrainingResult(records, model, ckpt, time.perf_counter() - started)
