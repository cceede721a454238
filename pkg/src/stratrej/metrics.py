"""Robustness curves, total robust losses, and clean-input selective metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_ALPHAS = (0.0, 0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.5, 1.0)
DENSE_SPACING = 0.01


@dataclass(frozen=True)
class RobustnessCurve:
    """Robust error with rejection ``s(alpha)`` on a grid spanning [0, 1]."""

    alphas: np.ndarray
    values: np.ndarray
    epsilon: float | None = None

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        s = np.asarray(self.values, dtype=np.float64)
        if a.shape != s.shape or a.ndim != 1:
            raise ValueError("alphas and values must be matching 1-D sequences")
        if a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) <= 0):
            raise ValueError("alpha grid must be increasing from 0 to 1")
        if np.any(s < 0) or np.any(s > 1):
            raise ValueError("curve values must lie in [0, 1]")
        if np.any(np.diff(s) < 0):
            raise ValueError("robust error curve must be nondecreasing in alpha")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "values", s)

    def at(self, alpha) -> np.ndarray | float:
        """Linear interpolation between grid points (exact on the grid)."""
        out = np.interp(alpha, self.alphas, self.values)
        return float(out) if np.ndim(out) == 0 else out

    def accuracy(self) -> np.ndarray:
        return 1.0 - self.values


@dataclass(frozen=True)
class RejectionLoss:
    """Cost of rejecting a perturbation of relative size ``alpha = r / epsilon``.

    ``step``: 1 if alpha <= alpha0 else 0. ``ramp``: (1 - alpha)^t on [0, 1].
    """

    kind: str
    param: float

    def __post_init__(self):
        if self.kind == "step" and not 0.0 <= self.param <= 1.0:
            raise ValueError("step loss needs alpha0 in [0, 1]")
        if self.kind == "ramp" and self.param < 0:
            raise ValueError("ramp loss needs t >= 0")
        if self.kind not in ("step", "ramp"):
            raise ValueError(f"unknown rejection loss {self.kind!r}")

    @classmethod
    def step(cls, alpha0: float) -> "RejectionLoss":
        return cls("step", float(alpha0))

    @classmethod
    def ramp(cls, t: float) -> "RejectionLoss":
        return cls("ramp", float(t))

    def __call__(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        if self.kind == "step":
            out = (alpha <= self.param).astype(np.float64)
        else:
            out = np.clip(1.0 - alpha, 0.0, 1.0) ** self.param
        return float(out) if out.ndim == 0 else out

    def describe(self) -> dict:
        return {"kind": self.kind, "alpha0" if self.kind == "step" else "t": self.param}

    @property
    def label(self) -> str:
        return f"step_{self.param:g}" if self.kind == "step" else f"ramp_{self.param:g}"


def robustness_curve(outcomes, alphas: Sequence[float] | None = None,
                     epsilon: float | None = None) -> RobustnessCurve:
    """Fraction of points that are rejected within ``alpha * epsilon`` or
    misclassified (including an accepted wrong clean prediction) within ``epsilon``."""
    if not outcomes:
        raise ValueError("no outcomes")
    grid = tuple(outcomes[0].alphas) if alphas is None else tuple(float(a) for a in alphas)
    if grid[0] != 0.0 or grid[-1] != 1.0:
        raise ValueError("alpha grid must contain 0 and 1")
    index = {a: i for i, a in enumerate(outcomes[0].alphas)}
    try:
        cols = [index[a] for a in grid]
    except KeyError as exc:
        raise ValueError(f"alpha {exc.args[0]} was not evaluated") from None
    inner = np.array([[o.inner_success[c] for c in cols] for o in outcomes], dtype=bool)
    base = np.array([o.outer_success or not o.clean_correct for o in outcomes], dtype=bool)
    return RobustnessCurve(np.array(grid), (inner | base[:, None]).mean(axis=0), epsilon)


def single_attack_curve(outcomes, inner_name: str | None = None,
                        outer_name: str | None = None) -> RobustnessCurve:
    """Curve that one inner attack and/or one outer attack would give on its own.

    Needs outcomes evaluated without early exit so per-attack flags are complete.
    A missing inner attack leaves only clean rejections; a missing outer attack
    leaves only accepted wrong clean predictions.
    """
    alphas = outcomes[0].alphas
    if inner_name is None:
        inner = np.array([[o.clean_rejected] * len(alphas) for o in outcomes], dtype=bool)
    else:
        inner = np.array([o.by_attack[inner_name] for o in outcomes], dtype=bool)
    if outer_name is None:
        outer = np.array([not o.clean_correct and not o.clean_rejected for o in outcomes], dtype=bool)
    else:
        outer = np.array([o.by_attack[outer_name] for o in outcomes], dtype=bool)
    return RobustnessCurve(np.array(alphas), (inner | outer[:, None]).mean(axis=0))


def empirical_p_rej(outcomes) -> float:
    """Fraction of points whose clean input is rejected with no misclassification in the ball."""
    return float(np.mean([o.clean_rejected and not o.outer_success for o in outcomes]))


def total_robust_loss_step(curve: RobustnessCurve, alpha0: float) -> float:
    if not 0.0 <= alpha0 <= 1.0:
        raise ValueError("alpha0 must lie in [0, 1]")
    return curve.at(alpha0)


def total_robust_loss_ramp(curve: RobustnessCurve, t: float, spacing: float = DENSE_SPACING) -> float:
    """``-int_0^1 s(alpha) d[(1 - alpha)^t]`` on a grid of the given spacing.

    The curve is linearly interpolated onto the dense grid and the Stieltjes
    integral is taken with the trapezoid average of ``s`` on each cell, so a
    constant curve integrates exactly.
    """
    if t < 1:
        raise ValueError("ramp total loss needs t >= 1")
    grid = np.linspace(0.0, 1.0, int(round(1.0 / spacing)) + 1)
    s = curve.at(grid)
    weight = (1.0 - grid) ** t
    return float(np.sum(0.5 * (s[1:] + s[:-1]) * (weight[:-1] - weight[1:])))


def total_robust_loss(curve: RobustnessCurve, loss: RejectionLoss) -> float:
    if loss.kind == "step":
        return total_robust_loss_step(curve, loss.param)
    return total_robust_loss_ramp(curve, loss.param)


def total_robust_loss_general(curve: RobustnessCurve, p_rej: float, loss_values) -> float:
    """Stieltjes-sum form valid for any nonincreasing rejection loss.

    ``loss_values[i]`` is the rejection loss at ``curve.alphas[i] * epsilon``;
    each increment of the curve is charged the loss at its right endpoint.
    """
    lv = np.asarray(loss_values, dtype=np.float64)
    if lv.shape != curve.alphas.shape:
        raise ValueError("need one loss value per curve grid point")
    if np.any(np.diff(lv) > 0):
        raise ValueError("rejection loss must be nonincreasing")
    if np.any(lv < 0) or np.any(lv > 1):
        raise ValueError("rejection loss values must lie in [0, 1]")
    s = curve.values
    return float(s[0] + (lv[0] - 1.0) * p_rej + np.sum(lv[1:] * np.diff(s)))


def traditional_metrics(outcomes) -> dict:
    """Clean accuracy among accepted inputs, clean rejection rate, their
    harmonic-mean score, and robust accuracy with detection."""
    correct = np.array([o.clean_correct for o in outcomes])
    rejected = np.array([o.clean_rejected for o in outcomes])
    accepted = ~rejected
    rej_rate = float(rejected.mean())
    acc = float(correct[accepted].mean()) if accepted.any() else None
    if acc is None or acc + (1 - rej_rate) == 0:
        f1 = None
    else:
        f1 = 2 * acc * (1 - rej_rate) / (acc + 1 - rej_rate)
    s0 = float(np.mean([(not o.clean_correct) or o.clean_rejected or o.outer_success for o in outcomes]))
    return {"acc_with_rej": acc, "rej_rate": rej_rate, "f1_like": f1,
            "robust_acc_with_detection": 1.0 - s0}


def write_curve_csv(curve: RobustnessCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "s"])
        for a, s in zip(curve.alphas, curve.values):
            writer.writerow([repr(float(a)), repr(float(s))])


def read_curve_csv(path) -> RobustnessCurve:
    """Read an ``alpha,s`` CSV; malformed rows raise ``ValueError`` naming the line."""
    alphas, values = [], []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: line 1: empty file")
    if [c.strip() for c in rows[0]] != ["alpha", "s"]:
        raise ValueError(f"{path}: line 1: expected header 'alpha,s'")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            a, s = (float(v) for v in row)
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: expected two numbers") from None
        alphas.append(a)
        values.append(s)
    if not alphas:
        raise ValueError(f"{path}: line 2: no data rows")
    try:
        return RobustnessCurve(np.array(alphas), np.array(values))
    except ValueError as exc:
        raise ValueError(f"{path}: line {len(rows)}: {exc}") from None


def write_outcomes_csv(outcomes, path) -> None:
    alphas = outcomes[0].alphas if outcomes else ()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["point_index", "clean_correct", "clean_rejected", "outer_success"]
                        + [f"inner_a{a:g}" for a in alphas])
        for i, o in enumerate(outcomes):
            writer.writerow([i, int(o.clean_correct), int(o.clean_rejected), int(o.outer_success)]
                            + [int(v) for v in o.inner_success])
