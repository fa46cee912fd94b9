"""Shared helpers for the test suite."""
from __future__ import annotations

import numpy as np

from moegap import tensor as T
from moegap.model import MoEModelConfig

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def gradcheck(build, inputs: list[np.ndarray], tol: float = 1e-4) -> list[float]:
    """``build(*tensors)`` returns a scalar Tensor; compare tape gradients with finite differences."""
    tensors = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    T.backward(build(*tensors))
    errors = []
    for t in tensors:
        def f():
            with T.no_grad():
                return build(*[T.Tensor(s.data) for s in tensors]).item()
        num = numeric_grad(f, t.data)
        errors.append(rel_error(t.grad, num))
    assert max(errors) < tol, errors
    return errors


def tiny_config(**overrides) -> MoEModelConfig:
    base = dict(vocab_size=32, d_model=8, n_layers=2, n_heads=2, n_experts=4, top_k=2,
                d_ffn=16, context_length=16, seed=3)
    base.update(overrides)
    return MoEModelConfig(**base)


def synthetic_cell(lam: float, seed: int, weight: float, activation: float, val_loss: float = 1.5,
                   n_layers: int = 1):
    """A finished sweep cell with chosen final metrics (layers share the values)."""
    from moegap.harness import CellResult
    from moegap.train import MetricsRecord

    rec = MetricsRecord(step=10, train_loss=val_loss, val_loss=val_loss, orth_loss=weight,
                        per_layer_weight_mso=[weight] * n_layers,
                        per_layer_activation_mso=[activation] * n_layers,
                        mean_weight_mso=weight, mean_activation_mso=activation,
                        gap_ratio=activation / weight, per_layer_gap_ratio=[activation / weight] * n_layers,
                        total_pairs=100)
    return CellResult(lam, seed, "ok", rec)


def tiny_plan(out_dir, lambdas=(0.0, 0.1), seeds=(1, 2), **train):
    from moegap.harness import ExperimentPlan
    from moegap.train import TrainConfig

    base = dict(iterations=2, batch_size=2, seq_len=16, eval_interval=2, eval_tokens=64)
    base.update(train)
    return ExperimentPlan(lambdas, seeds, tiny_config(vocab_size=256), TrainConfig(**base), out_dir)
