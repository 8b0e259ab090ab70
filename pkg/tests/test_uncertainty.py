import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdiff.errors import InvalidArgumentError
from sfdiff.uncertainty import (ThresholdSchedule, build_uncertainty_gt,
                                continuous_uncertainty_gt, thresholds_at, uncertainty_loss)


def flows(pred_norm, gt_norm):
    """Collinear flow pair along x with the requested norms (exact arithmetic)."""
    sf = torch.tensor([[pred_norm, 0.0, 0.0]], dtype=torch.float64)
    gt = torch.tensor([[gt_norm, 0.0, 0.0]], dtype=torch.float64)
    return sf, gt


# ---------------------------------------------------------------------------
# threshold schedule


def test_thresholds_epoch_zero():
    assert thresholds_at(ThresholdSchedule(), 0) == (0.5, 0.5)


def test_thresholds_floor():
    sched = ThresholdSchedule()
    assert thresholds_at(sched, 100000) == (0.02, 0.02)


def test_thresholds_two_intervals():
    e1, e2 = thresholds_at(ThresholdSchedule(), 20)
    assert abs(e1 - 0.32) < 1e-12 and abs(e2 - 0.32) < 1e-12


def test_thresholds_step_boundaries():
    sched = ThresholdSchedule()
    assert thresholds_at(sched, 9) == (0.5, 0.5)
    e1, _ = thresholds_at(sched, 10)
    assert abs(e1 - 0.4) < 1e-12


def test_thresholds_negative_epoch():
    with pytest.raises(InvalidArgumentError):
        thresholds_at(ThresholdSchedule(), -1)


def test_threshold_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        ThresholdSchedule(decay=1.0)
    with pytest.raises(InvalidArgumentError):
        ThresholdSchedule(floor=0.0)
    with pytest.raises(InvalidArgumentError):
        ThresholdSchedule(e1_init=0.01)


# ---------------------------------------------------------------------------
# binary ground-truth construction


def test_gt_exact_prediction_is_reliable():
    sf = torch.randn(10, 3, dtype=torch.float64)
    u = build_uncertainty_gt(sf, sf, 0.5, 0.5)
    assert torch.count_nonzero(u) == 0
    assert u.shape == (10, 1)


def test_gt_truth_table_quadrants():
    # gt norm 1 so e_re == e_ab; (E1, E2) chosen to separate the cases
    cases = [
        (0.1, 0.5, 0.5, 0.0),   # e_ab < E1 and e_re < E2 → reliable
        (0.6, 0.5, 0.5, 1.0),   # both high (the Eq-style 0.6/1.0 example)
        (0.3, 0.5, 0.2, 1.0),   # e_ab < E1 but e_re ≥ E2
        (0.3, 0.2, 0.5, 1.0),   # e_ab ≥ E1 but e_re < E2
    ]
    for err, e1, e2, expect in cases:
        sf, gt = flows(1.0 + err, 1.0)
        assert float(build_uncertainty_gt(sf, gt, e1, e2)[0, 0]) == expect


def test_gt_boundary_equality_is_unreliable():
    sf, gt = flows(1.5, 1.0)  # e_ab = 0.5 exactly
    assert float(build_uncertainty_gt(sf, gt, 0.5, 0.9)[0, 0]) == 1.0
    sf, gt = flows(1.25, 1.0)  # e_re = 0.25 exactly
    assert float(build_uncertainty_gt(sf, gt, 0.5, 0.25)[0, 0]) == 1.0


def test_gt_zero_flow_guard():
    sf = torch.tensor([[1e-6, 0.0, 0.0]], dtype=torch.float64)
    gt = torch.zeros(1, 3, dtype=torch.float64)
    assert float(build_uncertainty_gt(sf, gt, 0.5, 0.5)[0, 0]) == 1.0


def test_gt_binary_valued():
    rng = np.random.default_rng(0)
    sf = torch.as_tensor(rng.normal(size=(200, 3)))
    gt = torch.as_tensor(rng.normal(size=(200, 3)))
    u = build_uncertainty_gt(sf, gt, 0.4, 0.6)
    assert set(np.unique(u.numpy())).issubset({0.0, 1.0})


@settings(max_examples=60, deadline=None)
@given(
    err=st.floats(0.0, 2.0),
    gt_norm=st.floats(0.0, 2.0),
    e1=st.floats(0.01, 1.0),
    e2=st.floats(0.01, 1.0),
    shrink=st.floats(0.1, 1.0),
)
def test_gt_monotone_under_shrinking_thresholds(err, gt_norm, e1, e2, shrink):
    sf, gt = flows(gt_norm + err, gt_norm)
    wide = build_uncertainty_gt(sf, gt, e1, e2)
    narrow = build_uncertainty_gt(sf, gt, e1 * shrink, e2 * shrink)
    assert float(narrow[0, 0]) >= float(wide[0, 0])


def test_gt_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        build_uncertainty_gt(torch.zeros(3, 3), torch.zeros(4, 3), 0.5, 0.5)


# ---------------------------------------------------------------------------
# continuous ablation variant


def test_continuous_gt_range_and_boundary():
    rng = np.random.default_rng(1)
    sf = torch.as_tensor(rng.normal(size=(50, 3)))
    gt = torch.as_tensor(rng.normal(size=(50, 3)))
    u = continuous_uncertainty_gt(sf, gt, 0.5, 0.5)
    assert float(u.min()) >= 0.0 and float(u.max()) <= 1.0
    exact = continuous_uncertainty_gt(gt, gt, 0.5, 0.5)
    assert torch.count_nonzero(exact) == 0


# ---------------------------------------------------------------------------
# loss


def test_uncertainty_loss_examples():
    u = torch.ones(6, 1, dtype=torch.float64)
    assert float(uncertainty_loss(u, u)) == 0.0
    assert float(uncertainty_loss(u, torch.zeros_like(u))) == 1.0


def test_uncertainty_loss_loop_oracle():
    rng = np.random.default_rng(2)
    a = torch.as_tensor(rng.normal(size=(13, 1)))
    b = torch.as_tensor(rng.normal(size=(13, 1)))
    acc = sum((float(a[i, 0]) - float(b[i, 0])) ** 2 for i in range(13)) / 13.0
    assert abs(float(uncertainty_loss(a, b)) - acc) < 1e-12
    with pytest.raises(InvalidArgumentError):
        uncertainty_loss(a, b[:5])
