import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratrej import metrics
from stratrej.attacks import AttackOutcome
from stratrej.metrics import RejectionLoss, RobustnessCurve

GRID = metrics.DEFAULT_ALPHAS


def outcome(correct=True, rejected=False, outer=False, inner=None, alphas=GRID):
    inner = tuple(inner) if inner is not None else (rejected,) * len(alphas)
    return AttackOutcome(correct, rejected, outer, inner, tuple(alphas))


def test_default_grid_has_ten_points():
    assert len(GRID) == 10 and GRID[0] == 0.0 and GRID[-1] == 1.0


def test_curve_validation():
    with pytest.raises(ValueError):
        RobustnessCurve(np.array([0.0, 0.5]), np.array([0.1, 0.2]))
    with pytest.raises(ValueError):
        RobustnessCurve(np.array([0.0, 1.0]), np.array([0.3, 0.2]))
    with pytest.raises(ValueError):
        RobustnessCurve(np.array([0.0, 1.0]), np.array([0.3, 1.2]))


def test_curve_from_outcomes():
    alphas = (0.0, 0.5, 1.0)
    outs = [
        outcome(alphas=alphas),  # robust
        outcome(outer=True, alphas=alphas),  # misclassified in the ball
        outcome(inner=(False, True, True), alphas=alphas),  # rejected at half radius
        outcome(rejected=True, alphas=alphas),  # clean rejected
        outcome(correct=False, alphas=alphas),  # accepted and wrong
    ]
    curve = metrics.robustness_curve(outs)
    np.testing.assert_allclose(curve.values, [0.6, 0.8, 0.8])
    assert metrics.empirical_p_rej(outs) == pytest.approx(0.2)


def test_never_rejecting_curve_is_flat():
    outs = [outcome(outer=i % 3 == 0) for i in range(9)]
    curve = metrics.robustness_curve(outs)
    assert np.all(curve.values == curve.values[0]) and curve.values[0] == pytest.approx(1 / 3)


def test_curve_subgrid_and_missing_alpha():
    outs = [outcome(inner=[a >= 0.2 for a in GRID])]
    assert list(metrics.robustness_curve(outs, (0.0, 0.2, 1.0)).values) == [0.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        metrics.robustness_curve(outs, (0.0, 0.33, 1.0))


def test_step_loss_reads_curve():
    curve = RobustnessCurve(np.array(GRID), np.linspace(0.1, 0.5, 10))
    for a0 in (0.0, 0.05, 0.1):
        assert metrics.total_robust_loss_step(curve, a0) == curve.at(a0)
        assert metrics.total_robust_loss(curve, RejectionLoss.step(a0)) == curve.at(a0)


@pytest.mark.parametrize("t", [1, 2, 3, 4])
def test_ramp_loss_of_constant_one_curve(t):
    curve = RobustnessCurve(np.array(GRID), np.ones(10))
    assert abs(metrics.total_robust_loss_ramp(curve, t) - 1.0) <= 1e-6


def test_ramp_loss_linear_curve():
    curve = RobustnessCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    # -int_0^1 a d(1-a) = 1/2
    assert metrics.total_robust_loss_ramp(curve, 1) == pytest.approx(0.5, abs=1e-12)
    # t=2: int_0^1 a * 2(1-a) da = 1/3, trapezoid error O(h^2)
    assert metrics.total_robust_loss_ramp(curve, 2) == pytest.approx(1 / 3, abs=1e-4)
    with pytest.raises(ValueError):
        metrics.total_robust_loss_ramp(curve, 0.5)


def test_rejection_loss_values():
    step, ramp = RejectionLoss.step(0.1), RejectionLoss.ramp(2)
    assert step(0.1) == 1.0 and step(0.11) == 0.0
    assert ramp(0.5) == 0.25 and ramp(1.0) == 0.0
    assert step.label == "step_0.1" and ramp.describe() == {"kind": "ramp", "t": 2.0}
    with pytest.raises(ValueError):
        RejectionLoss.step(1.5)
    with pytest.raises(ValueError):
        RejectionLoss("hinge", 1.0)


def test_general_total_loss_matches_per_point_definition():
    alphas = np.linspace(0, 1, 11)
    # first rejection ring per point; -1 never rejected; plus misclassified / clean-rejected points
    first = np.array([-1, 0, 3, 3, 7, 10, -1])
    mis = np.array([False, False, False, True, False, False, True])
    s = np.array([np.mean(mis | ((first >= 0) & (first <= k))) for k in range(11)])
    curve = RobustnessCurve(alphas, s)
    p_rej = np.mean((first == 0) & ~mis)
    loss = RejectionLoss.ramp(2)
    direct = np.mean(np.where(mis, 1.0, np.where(first >= 0, loss(np.maximum(first, 0) / 10), 0.0)))
    got = metrics.total_robust_loss_general(curve, p_rej, loss(alphas))
    assert got == pytest.approx(direct, abs=1e-12)


def test_general_total_loss_validation():
    curve = RobustnessCurve(np.array([0.0, 1.0]), np.array([0.1, 0.2]))
    with pytest.raises(ValueError):
        metrics.total_robust_loss_general(curve, 0.0, [0.0, 1.0])
    with pytest.raises(ValueError):
        metrics.total_robust_loss_general(curve, 0.0, [1.0])


def test_traditional_metrics():
    outs = [outcome(), outcome(correct=False), outcome(rejected=True, correct=False), outcome(outer=True)]
    m = metrics.traditional_metrics(outs)
    assert m["rej_rate"] == 0.25
    assert m["acc_with_rej"] == pytest.approx(2 / 3)
    assert m["f1_like"] == pytest.approx(2 * (2 / 3) * 0.75 / (2 / 3 + 0.75))
    curve = metrics.robustness_curve(outs)
    assert m["robust_acc_with_detection"] == 1.0 - curve.values[0]
    none = metrics.traditional_metrics([outcome(rejected=True)])
    assert none["acc_with_rej"] is None and none["f1_like"] is None


def test_curve_csv_round_trip(tmp_path):
    curve = RobustnessCurve(np.array(GRID), np.linspace(0.1, 0.3, 10) ** 2)
    metrics.write_curve_csv(curve, tmp_path / "c.csv")
    back = metrics.read_curve_csv(tmp_path / "c.csv")
    assert np.array_equal(back.alphas, curve.alphas) and np.array_equal(back.values, curve.values)


@pytest.mark.parametrize("text,line", [("", "line 1"), ("alpha,s\n0,0.1\n0.5,x\n", "line 3"),
                                       ("a,b\n", "line 1"), ("alpha,s\n", "line 2")])
def test_curve_csv_errors_name_line(tmp_path, text, line):
    (tmp_path / "c.csv").write_text(text)
    with pytest.raises(ValueError, match=line):
        metrics.read_curve_csv(tmp_path / "c.csv")


def test_outcomes_csv_layout(tmp_path):
    outs = [outcome(inner=[a >= 0.5 for a in GRID])]
    metrics.write_outcomes_csv(outs, tmp_path / "o.csv")
    header, row = (tmp_path / "o.csv").read_text().splitlines()
    assert header.startswith("point_index,clean_correct,clean_rejected,outer_success,inner_a0,inner_a0.01")
    assert row == "0,1,0,0," + ",".join(["0"] * 8 + ["1", "1"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.floats(1, 6))
def test_ramp_loss_bounded_by_curve_range(raw, t):
    s = np.sort(np.asarray(raw))
    curve = RobustnessCurve(np.linspace(0, 1, len(s)), s)
    loss = metrics.total_robust_loss_ramp(curve, t)
    assert s[0] - 1e-12 <= loss <= s[-1] + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.floats(0, 1))
def test_step_losses_monotone_in_threshold(raw, a0):
    s = np.sort(np.asarray(raw))
    curve = RobustnessCurve(np.linspace(0, 1, len(s)), s)
    assert metrics.total_robust_loss_step(curve, a0) <= metrics.total_robust_loss_step(curve, min(1.0, a0 + 0.1))
