"""Expert-overlap measures: the orthogonality penalty, weight MSO and activation MSO.

All three use squared cosines between unit vectors, so every reported overlap
lies in [0, 1]: 0 for mutually orthogonal experts, 1 for parallel ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .model import RoutingTrace
from .tensor import Tensor

SKIP_FLAG_FRACTION = 0.01
GAP_FLOOR = 0.01


class DegenerateParameterError(ValueError):
    """An expert weight matrix has zero (or non-finite) norm, so its direction is undefined."""


class UndefinedMetricError(ValueError):
    pass


def _as_array(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)


def _check_norm(arr: np.ndarray, layer: int, expert: int) -> float:
    norm = float(np.linalg.norm(arr))
    if not norm > 0.0 or not math.isfinite(norm):
        raise DegenerateParameterError(
            f"layer {layer} expert {expert}: weight norm is {norm}; cannot normalize")
    return norm


@dataclass(frozen=True)
class NormalizedWeightVector:
    layer: int
    expert: int
    vector: np.ndarray

    @classmethod
    def from_weight(cls, w, layer: int = 0, expert: int = 0) -> NormalizedWeightVector:
        arr = _as_array(w).reshape(-1)
        return cls(layer, expert, arr / _check_norm(arr, layer, expert))


def _upper_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n)), k=1)


def orthogonality_loss_per_layer(experts_per_layer: Sequence[Sequence[Tensor]]) -> list[Tensor]:
    """Sum over expert pairs ``i < j`` of squared cosines of flattened ``W_up``, one tensor per layer."""
    losses = []
    for layer, weights in enumerate(experts_per_layer):
        n = len(weights)
        if n < 2:
            raise UndefinedMetricError(f"layer {layer}: need at least two experts, got {n}")
        units = []
        for e, w in enumerate(weights):
            w = w if isinstance(w, Tensor) else Tensor(w)
            _check_norm(w.data, layer, e)
            flat = T.reshape(w, (-1,))
            units.append(T.div(flat, T.sqrt(T.tsum(T.square(flat)))))
        stacked = T.stack(units)
        gram = T.matmul(stacked, T.transpose(stacked))
        losses.append(T.tsum(T.mul(T.square(gram), Tensor(_upper_mask(n)))))
    return losses


def orthogonality_loss(experts_per_layer: Sequence[Sequence[Tensor]]) -> Tensor:
    """Orthogonality penalty summed across layers; differentiable through the normalization."""
    per_layer = orthogonality_loss_per_layer(experts_per_layer)
    total = per_layer[0]
    for term in per_layer[1:]:
        total = T.add(total, term)
    return total


def weight_mso_per_layer(experts_per_layer) -> list[float]:
    out = []
    for layer, weights in enumerate(experts_per_layer):
        n = len(weights)
        if n < 2:
            raise UndefinedMetricError(f"layer {layer}: need at least two experts, got {n}")
        units = np.stack([NormalizedWeightVector.from_weight(w, layer, e).vector
                          for e, w in enumerate(weights)])
        gram = units @ units.T
        iu = np.triu_indices(n, k=1)
        sq = np.minimum(gram[iu] ** 2, 1.0)
        out.append(float(sq.sum() * 2.0 / (n * (n - 1))))
    return out


def weight_mso(experts_per_layer) -> tuple[list[float], float]:
    """Per-layer pair-averaged squared cosine of flattened ``W_up`` and its layer mean."""
    per_layer = weight_mso_per_layer(experts_per_layer)
    return per_layer, float(np.mean(per_layer))


@dataclass
class ActivationOverlap:
    per_layer: list[float]
    mean: float
    tokens_per_layer: list[int]
    skipped_pairs: int
    total_pairs: int

    @property
    def flagged(self) -> bool:
        return self.total_pairs > 0 and self.skipped_pairs / self.total_pairs > SKIP_FLAG_FRACTION


def activation_mso(traces: Iterable[RoutingTrace]) -> ActivationOverlap:
    """Token-averaged squared cosine between the outputs of co-selected experts.

    Traces may arrive in any number of shards per layer; each layer's value is
    the running mean over all its tokens, and the aggregate is the mean over
    layers.  Pairs with a zero-norm output are skipped and tallied.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    skipped = total = 0
    for trace in traces:
        k = trace.k
        if k < 2:
            raise UndefinedMetricError("activation MSO needs at least two selected experts per token")
        h = np.asarray(trace.outputs, dtype=np.float64)
        norms = np.linalg.norm(h, axis=-1)
        iu, ju = np.triu_indices(k, k=1)
        valid = (norms[:, iu] > 0) & (norms[:, ju] > 0)
        safe = np.where(norms > 0, norms, 1.0)
        units = h / safe[..., None]
        cos = np.einsum("tpd,tpd->tp", units[:, iu], units[:, ju])
        sq = np.where(valid, np.minimum(cos * cos, 1.0), 0.0)
        n_valid = valid.sum(axis=1)
        keep = n_valid > 0
        per_token = sq[keep].sum(axis=1) / n_valid[keep]
        sums[trace.layer] = sums.get(trace.layer, 0.0) + float(per_token.sum())
        counts[trace.layer] = counts.get(trace.layer, 0) + int(keep.sum())
        total += valid.size
        skipped += int(valid.size - valid.sum())
    if not counts:
        raise UndefinedMetricError("activation MSO needs a non-empty evaluation stream")
    layers = sorted(counts)
    if any(counts[l] == 0 for l in layers):
        raise UndefinedMetricError("every pair in some layer had a zero-norm output")
    per_layer = [sums[l] / counts[l] for l in layers]
    return ActivationOverlap(per_layer, float(np.mean(per_layer)),
                             [counts[l] for l in layers], skipped, total)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.inf


@dataclass
class OverlapReport:
    per_layer_weight_mso: list[float]
    per_layer_activation_mso: list[float]
    mean_weight_mso: float
    mean_activation_mso: float
    per_layer_gap_ratio: list[float] = field(default_factory=list)
    gap_ratio: float = math.nan
    skipped_pairs: int = 0
    total_pairs: int = 0

    @classmethod
    def build(cls, per_layer_weight: Sequence[float], activation: ActivationOverlap) -> OverlapReport:
        w = [float(v) for v in per_layer_weight]
        a = [float(v) for v in activation.per_layer]
        if len(w) != len(a):
            raise ValueError(f"layer count mismatch: {len(w)} weight vs {len(a)} activation")
        mean_w, mean_a = float(np.mean(w)), float(np.mean(a))
        return cls(w, a, mean_w, mean_a, [_ratio(x, y) for x, y in zip(a, w)],
                   _ratio(mean_a, mean_w), activation.skipped_pairs, activation.total_pairs)

    @property
    def flagged(self) -> bool:
        return self.total_pairs > 0 and self.skipped_pairs / self.total_pairs > SKIP_FLAG_FRACTION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flagged"] = self.flagged
        return _json_safe(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> OverlapReport:
        def num(x):
            return math.inf if x is None else float(x)

        return cls(
            per_layer_weight_mso=[float(x) for x in d["per_layer_weight_mso"]],
            per_layer_activation_mso=[float(x) for x in d["per_layer_activation_mso"]],
            mean_weight_mso=float(d["mean_weight_mso"]),
            mean_activation_mso=float(d["mean_activation_mso"]),
            per_layer_gap_ratio=[num(x) for x in d.get("per_layer_gap_ratio", [])],
            gap_ratio=num(d.get("gap_ratio")),
            skipped_pairs=int(d.get("skipped_pairs", 0)),
            total_pairs=int(d.get("total_pairs", 0)),
        )


def _json_safe(obj):
    # non-finite floats become null so the output stays strict JSON
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# -- trace-zero versus annihilation -------------------------------------------

@dataclass
class GapArm:
    name: str
    flattened_inner: float  # <vec W1, vec W2> / (|W1| |W2|)
    trace: float            # tr(W1^T W2)
    cross_norm: float       # Frobenius norm of W1^T W2
    mean_sq_cos: float
    mean_abs_cos: float
    median_abs_cos: float
    q95_abs_cos: float
    max_abs_cos: float
    abs_cos: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("abs_cos")
        return d


@dataclass
class GapOracleReport:
    d_model: int
    d_ffn: int
    trials: int
    seed: int
    floor: float
    trace_zero: GapArm
    annihilated: GapArm

    @property
    def gap_demonstrated(self) -> bool:
        return (abs(self.trace_zero.flattened_inner) <= 1e-12
                and self.trace_zero.mean_sq_cos > self.floor
                and self.annihilated.max_abs_cos <= 1e-12)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "d_ffn": self.d_ffn, "trials": self.trials,
            "seed": self.seed, "floor": self.floor,
            "gap_demonstrated": self.gap_demonstrated,
            "trace_zero": self.trace_zero.to_dict(),
            "annihilated": self.annihilated.to_dict(),
        }


def activation_cosines(w1: np.ndarray, w2: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cosine between ``w1 @ x_t`` and ``w2 @ x_t`` for every row ``x_t`` of ``x``."""
    z1, z2 = x @ w1.T, x @ w2.T
    return np.einsum("ti,ti->t", z1, z2) / (np.linalg.norm(z1, axis=1) * np.linalg.norm(z2, axis=1))


def _arm(name: str, w1: np.ndarray, w2: np.ndarray, x: np.ndarray) -> GapArm:
    cos = activation_cosines(w1, w2, x)
    a = np.abs(cos)
    cross = w1.T @ w2
    return GapArm(
        name=name,
        flattened_inner=float(w1.reshape(-1) @ w2.reshape(-1)
                              / (np.linalg.norm(w1) * np.linalg.norm(w2))),
        trace=float(np.trace(cross)),
        cross_norm=float(np.linalg.norm(cross)),
        mean_sq_cos=float(np.mean(cos * cos)),
        mean_abs_cos=float(a.mean()),
        median_abs_cos=float(np.median(a)),
        q95_abs_cos=float(np.quantile(a, 0.95)),
        max_abs_cos=float(a.max()),
        abs_cos=a,
    )


def trace_zero_pair(d_model: int, d_ffn: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian ``W1, W2`` with ``W2`` orthogonalized against ``W1`` in flattened space."""
    w1 = rng.standard_normal((d_ffn, d_model))
    w2 = rng.standard_normal((d_ffn, d_model))
    f1 = w1.reshape(-1)
    for _ in range(2):  # second pass removes the residual left by rounding
        w2 = w2 - (f1 @ w2.reshape(-1)) / (f1 @ f1) * w1
    return w1, w2


def annihilating_pair(d_model: int, d_ffn: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``W1, W2`` on disjoint output rows, so ``W1^T W2`` is exactly zero."""
    half = d_ffn // 2
    w1 = np.zeros((d_ffn, d_model))
    w2 = np.zeros((d_ffn, d_model))
    w1[:half] = rng.standard_normal((half, d_model))
    w2[half:] = rng.standard_normal((d_ffn - half, d_model))
    return w1, w2


def gap_oracle(d_model: int = 32, d_ffn: int = 32, trials: int = 10_000, seed: int = 0,
               floor: float = GAP_FLOOR) -> GapOracleReport:
    """Show that a zero Frobenius inner product leaves activation cosines free.

    ``tr(W1^T W2) = 0`` only fixes the trace; the quadratic form
    ``x^T W1^T W2 x`` is still non-zero for typical ``x``.  The control arm has
    ``W1^T W2 = 0`` outright and gives zero cosine for every input.
    """
    if d_model < 2 or d_ffn < 2:
        raise ValueError("gap_oracle needs d_model >= 2 and d_ffn >= 2")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((trials, d_model))
    tz = _arm("trace_zero", *trace_zero_pair(d_model, d_ffn, rng), x)
    ann = _arm("annihilated", *annihilating_pair(d_model, d_ffn, rng), x)
    return GapOracleReport(d_model, d_ffn, trials, seed, floor, tz, ann)
