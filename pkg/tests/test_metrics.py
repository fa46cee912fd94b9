from __future__ import annotations

import json
import math

import numpy as np
import pytest

from moegap import tensor as T
from moegap.metrics import (ActivationOverlap, DegenerateParameterError, NormalizedWeightVector,
                            OverlapReport, UndefinedMetricError, activation_cosines, activation_mso,
                            annihilating_pair, gap_oracle, orthogonality_loss,
                            orthogonality_loss_per_layer, trace_zero_pair, weight_mso,
                            weight_mso_per_layer)
from moegap.model import RoutingTrace
from _util import gradcheck

rng = np.random.default_rng(3)


def tensors(*arrays):
    return [T.Tensor(np.asarray(a, dtype=float)) for a in arrays]


def orthonormal_experts(n, shape):
    q, _ = np.linalg.qr(rng.standard_normal((int(np.prod(shape)), n)))
    return [q[:, i].reshape(shape) * (i + 1.5) for i in range(n)]


def stub_trace(h1, h2, layer=0):
    h = np.stack([np.asarray(h1, float), np.asarray(h2, float)], axis=1)
    n = h.shape[0]
    return RoutingTrace(layer, np.tile([0, 1], (n, 1)), np.full((n, 2), 0.5), h)


# -- weight side -------------------------------------------------------------------

def test_loss_examples():
    assert orthogonality_loss([tensors(np.eye(4)[0], np.eye(4)[1], np.eye(4)[2])]).item() == pytest.approx(0, abs=1e-15)
    w = rng.standard_normal((3, 2))
    assert orthogonality_loss([tensors(w, w)]).item() == pytest.approx(1.0, abs=1e-12)
    assert orthogonality_loss([tensors([1, 0], [1, 1] / np.sqrt(2))]).item() == pytest.approx(0.5, abs=1e-12)


def test_weight_mso_examples():
    per_layer, mean = weight_mso([tensors(*orthonormal_experts(4, (3, 5))), tensors(*orthonormal_experts(3, (2, 2)))])
    assert max(per_layer) < 1e-12 and mean < 1e-12
    w = rng.standard_normal((4, 3))
    assert weight_mso([tensors(w, w, 2 * w)])[1] == pytest.approx(1.0, abs=1e-12)
    assert weight_mso([tensors([1, 0], [1, 1])])[1] == pytest.approx(0.5, abs=1e-12)


def test_loss_equals_pairs_times_mso():
    layers = [tensors(*rng.standard_normal((n, 4, 6))) for n in (2, 3, 5)]
    losses = [l.item() for l in orthogonality_loss_per_layer(layers)]
    msos = weight_mso_per_layer(layers)
    for n, loss, mso in zip((2, 3, 5), losses, msos):
        assert loss == pytest.approx(math.comb(n, 2) * mso, abs=1e-12)
    assert orthogonality_loss(layers).item() == pytest.approx(sum(losses), abs=1e-12)


def test_permutation_and_scale_invariance():
    ws = list(rng.standard_normal((4, 3, 5)))
    base_loss = orthogonality_loss([tensors(*ws)]).item()
    base_mso = weight_mso([tensors(*ws)])[1]
    perm = [ws[i] for i in (2, 0, 3, 1)]
    scaled = [w * s for w, s in zip(ws, (3.0, 0.01, 7.5, 1e4))]
    for variant in (perm, scaled):
        assert orthogonality_loss([tensors(*variant)]).item() == pytest.approx(base_loss, abs=1e-12)
        assert weight_mso([tensors(*variant)])[1] == pytest.approx(base_mso, abs=1e-12)


def test_mso_bounds():
    for _ in range(20):
        per_layer, mean = weight_mso([tensors(*rng.standard_normal((3, 2, 2)))])
        assert 0.0 <= mean <= 1.0 + 1e-15


def test_zero_norm_weight_is_an_error():
    with pytest.raises(DegenerateParameterError):
        orthogonality_loss([tensors(np.zeros((2, 2)), np.ones((2, 2)))])
    with pytest.raises(DegenerateParameterError):
        weight_mso([tensors(np.ones((2, 2)), np.zeros((2, 2)))])


def test_single_expert_layer_is_rejected():
    with pytest.raises((DegenerateParameterError, UndefinedMetricError, ValueError)):
        weight_mso([tensors(np.ones((2, 2)))])


def test_normalized_weight_vector():
    v = NormalizedWeightVector.from_weight(rng.standard_normal((6, 4)), layer=1, expert=2)
    assert abs(np.linalg.norm(v.vector) - 1.0) <= 1e-12
    assert v.vector.size == 24 and (v.layer, v.expert) == (1, 2)


@pytest.mark.parametrize("lam", [0.3, 50.0])
def test_penalty_gradient_matches_finite_differences(lam):
    ws = list(rng.standard_normal((3, 4, 5)))
    gradcheck(lambda a, b, c: T.scale(orthogonality_loss([[a, b], [b, c], [a, c]]), lam), ws)


# -- activation side ---------------------------------------------------------------

def test_activation_examples():
    h = rng.standard_normal((7, 5))
    assert activation_mso([stub_trace(h, 2.5 * h)]).mean == pytest.approx(1.0, abs=1e-12)
    e = np.eye(5)
    assert activation_mso([stub_trace(np.tile(e[0], (4, 1)), np.tile(e[1], (4, 1)))]).mean == pytest.approx(0, abs=1e-15)
    res = activation_mso([stub_trace([[1, 0], [1, 0], [1, 0]], [[1, 0], [0, 1], [0.6, 0.8]])])
    assert res.mean == pytest.approx((1 + 0 + 0.36) / 3, abs=1e-12)
    assert res.mean == pytest.approx(0.45333333333333, abs=1e-12)


def test_activation_running_mean_over_shards_and_layers():
    a = [[1, 0], [1, 0], [1, 0]]
    b = [[1, 0], [0, 1], [0.6, 0.8]]
    whole = activation_mso([stub_trace(a, b), stub_trace(a, a, layer=1)])
    sharded = activation_mso([stub_trace(a[:1], b[:1]), stub_trace(a, a, layer=1), stub_trace(a[1:], b[1:])])
    assert whole.per_layer == pytest.approx(sharded.per_layer, abs=1e-15)
    assert whole.per_layer == pytest.approx([0.4533333333333333, 1.0], abs=1e-12)
    assert whole.mean == pytest.approx(np.mean(whole.per_layer), abs=1e-15)


def test_activation_three_experts_pair_average():
    h = np.array([[[1, 0], [0, 1], [1, 1]]], dtype=float)
    tr = RoutingTrace(0, np.array([[0, 1, 2]]), np.full((1, 3), 1 / 3), h)
    assert activation_mso([tr]).mean == pytest.approx((0 + 0.5 + 0.5) / 3, abs=1e-12)


def test_activation_permutation_invariance():
    h1, h2 = rng.standard_normal((2, 9, 4))
    assert activation_mso([stub_trace(h1, h2)]).mean == pytest.approx(activation_mso([stub_trace(h2, h1)]).mean, abs=1e-15)


def test_zero_norm_pairs_are_skipped_and_flagged():
    h1 = rng.standard_normal((10, 3))
    h2 = h1.copy()
    h2[0] = 0.0
    res = activation_mso([stub_trace(h1, h2)])
    assert res.skipped_pairs == 1 and res.total_pairs == 10
    assert res.tokens_per_layer == [9]
    assert res.mean == pytest.approx(1.0, abs=1e-12)
    assert res.flagged


def test_activation_errors():
    with pytest.raises(UndefinedMetricError):
        activation_mso([RoutingTrace(0, np.zeros((2, 1), int), np.ones((2, 1)), np.ones((2, 1, 3)))])
    with pytest.raises(UndefinedMetricError):
        activation_mso([])


def test_overlap_report_json_round_trip():
    act = ActivationOverlap([0.5, 0.7], 0.6, [10, 10], 0, 20)
    rep = OverlapReport.build([1e-3, 0.0], act)
    assert rep.mean_weight_mso == pytest.approx(5e-4)
    assert rep.per_layer_gap_ratio[0] == pytest.approx(500.0) and math.isinf(rep.per_layer_gap_ratio[1])
    d = json.loads(rep.to_json())
    assert d["per_layer_gap_ratio"][1] is None
    assert OverlapReport.from_dict(d) == rep


# -- gap oracle --------------------------------------------------------------------

def test_gap_oracle_default():
    rep = gap_oracle()
    tz, ann = rep.trace_zero, rep.annihilated
    assert abs(tz.flattened_inner) <= 1e-12 and abs(tz.trace) / tz.cross_norm <= 1e-12
    assert tz.mean_sq_cos > 0.01
    assert ann.cross_norm == 0.0 and ann.max_abs_cos <= 1e-12
    assert rep.gap_demonstrated
    assert set(rep.to_dict()) >= {"trace_zero", "annihilated"}


def test_trace_zero_construction_invariant_across_seeds():
    for seed in range(10):
        w1, w2 = trace_zero_pair(32, 32, np.random.default_rng(seed))
        cos = w1.ravel() @ w2.ravel() / (np.linalg.norm(w1) * np.linalg.norm(w2))
        assert abs(cos) <= 1e-12
        assert np.linalg.norm(w1.T @ w2) > 1.0


def test_annihilating_control_gives_zero_cosine_everywhere():
    w1, w2 = annihilating_pair(8, 10, np.random.default_rng(0))
    assert not np.any(w1.T @ w2)
    x = np.random.default_rng(1).standard_normal((1000, 8))
    assert np.all(activation_cosines(w1, w2, x) == 0.0)


def test_skew_symmetric_cross_product_is_a_second_annihilator():
    # x^T S x = 0 for skew-symmetric S, so such a pair has zero cosine for every x
    w1, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    a = rng.standard_normal((6, 6))
    w2 = w1 @ (a - a.T)
    s = w1.T @ w2
    assert np.allclose(s, -s.T, atol=1e-12) and abs(np.trace(s)) < 1e-12
    x = rng.standard_normal((500, 6))
    assert np.max(np.abs(activation_cosines(w1, w2, x))) < 1e-12


def test_symmetric_traceless_cross_product_leaves_cosine_free():
    w1, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    w2 = w1 @ np.diag([1.0, -1.0, 2.0, -2.0, 0.5, -0.5])
    assert abs(np.trace(w1.T @ w2)) < 1e-12
    x = rng.standard_normal((5000, 6))
    assert np.mean(activation_cosines(w1, w2, x) ** 2) > 0.01
