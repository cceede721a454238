"""Selective classifiers: consistency-based rejection (CPR) and confidence thresholds.

Decisions are integer arrays where a class label is in ``[0, k)`` and
:data:`REJECT` (``-1``) marks abstention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn

REJECT = -1


class CalibrationError(ValueError):
    pass


def project_linf(z, center, radius, box=None):
    """Project onto the l-inf ball around ``center`` and, if given, the box ``(lo, hi)``."""
    z = np.clip(z, center - radius, center + radius)
    if box is not None:
        z = np.clip(z, box[0], box[1])
    return z


@dataclass(frozen=True)
class CprConfig:
    radius: float  # consistency radius
    steps: int = 10
    step_size: float = 0.01
    box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("consistency radius must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class ConfidenceConfig:
    threshold: float

    def __post_init__(self):
        if not np.isfinite(self.threshold) or self.threshold < 0:
            raise ValueError("threshold must be a finite nonnegative number")


def cpr_transport(model: nn.Mlp, x, cfg: CprConfig) -> np.ndarray:
    """The deterministic map T: ``steps`` signed-gradient ascent steps on the
    cross-entropy of the clean prediction, projected onto the consistency ball."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if cfg.steps == 0 or cfg.radius == 0:
        return x.copy()
    pred = nn.predict(model, batch)
    spec = nn.LossSpec.cross_entropy(pred)
    z = batch.copy()
    for _ in range(cfg.steps):
        g = nn.grad_input(model, z, spec)
        z = project_linf(z + cfg.step_size * np.sign(g), batch, cfg.radius, cfg.box)
    return z[0] if single else z


def cpr_classify(model: nn.Mlp, x, cfg: CprConfig) -> np.ndarray:
    """Reject where the base prediction at T(x) differs from the one at x."""
    x = np.asarray(x, dtype=np.float64)
    pred = nn.predict(model, x)
    moved = nn.predict(model, cpr_transport(model, x, cfg))
    return np.where(moved == pred, pred, REJECT)


def confidence_classify(model: nn.Mlp, x, cfg: ConfidenceConfig) -> np.ndarray:
    """Reject where the top softmax probability is strictly below the threshold."""
    _, probs = nn.forward(model, x)
    return np.where(probs.max(axis=-1) < cfg.threshold, REJECT, nn.argmax(probs))


class SelectiveClassifier:
    """Common interface used by the attack ensemble and the CLI."""

    kind = "base"

    def __init__(self, model: nn.Mlp):
        self.model = model

    def decide(self, x) -> np.ndarray:
        return nn.predict(self.model, x)

    def describe(self) -> dict:
        return {"kind": self.kind}


class BaseClassifier(SelectiveClassifier):
    """Wraps a model that never abstains."""


class CprClassifier(SelectiveClassifier):
    kind = "cpr"

    def __init__(self, model, cfg: CprConfig):
        super().__init__(model)
        self.cfg = cfg

    def decide(self, x):
        return cpr_classify(self.model, x, self.cfg)

    def transport(self, x):
        return cpr_transport(self.model, x, self.cfg)

    def describe(self):
        return {"kind": self.kind, "radius": self.cfg.radius, "steps": self.cfg.steps,
                "step_size": self.cfg.step_size}


class ConfidenceClassifier(SelectiveClassifier):
    kind = "confidence"

    def __init__(self, model, cfg: ConfidenceConfig):
        super().__init__(model)
        self.cfg = cfg

    def decide(self, x):
        return confidence_classify(self.model, x, self.cfg)

    def describe(self):
        return {"kind": self.kind, "threshold": self.cfg.threshold}


def _correct_points(model, x, y):
    correct = nn.predict(model, x) == np.asarray(y)
    if not correct.any():
        raise CalibrationError("no correctly classified validation points")
    return np.asarray(x)[correct]


def calibrate_confidence(model: nn.Mlp, x, y, p_rej: float) -> ConfidenceConfig:
    """Largest empirical threshold rejecting at most ``p_rej`` of the correctly
    classified validation points."""
    if not 0.0 <= p_rej < 1.0:
        raise ValueError("p_rej must lie in [0, 1)")
    good = _correct_points(model, x, y)
    conf = np.sort(nn.forward(model, good)[1].max(axis=1))
    allowed = int(np.floor(p_rej * len(conf) + 1e-9))
    # strict "<" means threshold conf[allowed] rejects only conf[:allowed] (fewer on ties)
    return ConfidenceConfig(float(conf[allowed]))


def rejection_rate(clf: SelectiveClassifier, x, y) -> float:
    """Fraction of correctly classified points (by the base model) that are rejected."""
    good = _correct_points(clf.model, x, y)
    return float(np.mean(clf.decide(good) == REJECT))


def calibrate_cpr(model: nn.Mlp, x, y, p_rej: float, radii: Sequence[float],
                  steps: int = 10, step_size: float | None = None, box=None):
    """Pick the consistency radius from ``radii`` whose rejection rate on correctly
    classified validation points first reaches ``p_rej``.

    Returns ``(config, achieved_rate)``. When no candidate reaches the target the
    largest candidate whose rate stays at or below it is returned.
    """
    if not 0.0 <= p_rej < 1.0:
        raise ValueError("p_rej must lie in [0, 1)")
    radii = sorted(float(r) for r in radii)
    if not radii:
        raise ValueError("need at least one candidate radius")
    good = _correct_points(model, x, y)
    below = None
    for r in radii:
        cfg = CprConfig(r, steps, step_size if step_size else max(r / 4, 1e-12), box)
        rate = float(np.mean(cpr_classify(model, good, cfg) == REJECT))
        if rate >= p_rej:
            return cfg, rate
        below = (cfg, rate)
    return below
