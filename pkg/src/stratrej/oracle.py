"""Analytic selective classifiers, closed-form curves, and an exact grid adversary.

The grid adversary enumerates every perturbation on an l-inf lattice of
spacing ``epsilon / steps`` and is used as ground truth for the empirical
machinery in :mod:`stratrej.metrics` and :mod:`stratrej.attacks`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import data
from .metrics import DEFAULT_ALPHAS, RejectionLoss, RobustnessCurve, total_robust_loss_general
from .selective import REJECT, CprClassifier, CprConfig


class UnsupportedDimension(ValueError):
    pass


class OutOfScope(ValueError):
    pass


@dataclass(frozen=True)
class AnalyticClassifier:
    """Binary classifier known through its signed l-inf margin (class 1 where margin > 0)."""

    margin: Callable[[np.ndarray], np.ndarray]
    name: str = "analytic"

    @classmethod
    def threshold(cls, t: float = 0.0) -> "AnalyticClassifier":
        return cls(data.linear_margin([1.0], -t), f"threshold({t:g})")

    @classmethod
    def linear(cls, w, b: float) -> "AnalyticClassifier":
        return cls(data.linear_margin(w, b), "linear")

    @classmethod
    def circle(cls, radius: float) -> "AnalyticClassifier":
        return cls(data.circle_margin(radius), f"circle({radius:g})")

    def classify(self, x) -> np.ndarray:
        return (self.margin(x) > 0).astype(np.int64)

    def decide(self, x) -> np.ndarray:
        return self.classify(x)


def fdelta_classify(base: AnalyticClassifier, delta: float, epsilon: float, x) -> np.ndarray:
    """Reject within ``delta * epsilon`` of the base boundary, else the base class."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    m = base.margin(x)
    cls = (m > 0).astype(np.int64)
    band = delta * epsilon
    if band <= 0:
        return cls
    return np.where(np.abs(m) <= band, REJECT, cls)


class FDelta:
    """``decide`` wrapper around :func:`fdelta_classify`."""

    def __init__(self, base: AnalyticClassifier, delta: float, epsilon: float):
        self.base, self.delta, self.epsilon = base, delta, epsilon

    def decide(self, x):
        return fdelta_classify(self.base, self.delta, self.epsilon, x)


@dataclass(frozen=True)
class RadialDensity:
    """Piecewise-constant density of the distance to the boundary.

    ``edges`` has one more entry than ``heights``; segment i covers
    ``[edges[i], edges[i+1])`` with density ``heights[i]``.
    """

    edges: np.ndarray
    heights: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        h = np.asarray(self.heights, dtype=np.float64)
        if e.ndim != 1 or h.shape != (len(e) - 1,) or len(h) == 0:
            raise ValueError("need len(edges) == len(heights) + 1 >= 2")
        if e[0] < 0 or np.any(np.diff(e) <= 0):
            raise ValueError("edges must be increasing from a nonnegative start")
        if np.any(h < 0):
            raise ValueError("density must be nonnegative")
        if abs(float(np.sum(h * np.diff(e))) - 1.0) > 1e-9:
            raise ValueError("density must integrate to 1")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "heights", h)

    @classmethod
    def uniform(cls, upper: float) -> "RadialDensity":
        return cls(np.array([0.0, upper]), np.array([1.0 / upper]))

    @property
    def sup(self) -> float:
        return float(self.heights.max())

    def cdf(self, r) -> np.ndarray | float:
        r = np.asarray(r, dtype=np.float64)
        lo, hi = self.edges[:-1], self.edges[1:]
        covered = np.clip(r[..., None], lo, hi) - lo
        out = np.sum(covered * self.heights, axis=-1)
        return float(out) if out.ndim == 0 else out

    def quantile(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        cum = np.concatenate([[0.0], np.cumsum(self.heights * np.diff(self.edges))])
        seg = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, len(self.heights) - 1)
        # skip zero-density segments: they never contain an interior quantile
        h = self.heights[seg]
        with np.errstate(divide="ignore", invalid="ignore"):
            inside = np.where(h > 0, (u - cum[seg]) / h, 0.0)
        return self.edges[seg] + inside

    def sample_points(self, n: int):
        """Deterministic 1-D dataset: quantile distances placed on both sides of 0."""
        r = self.quantile((np.arange(n) + 0.5) / n)
        x = np.concatenate([r, -r])[:, None]
        y = np.concatenate([np.ones(n, np.int64), np.zeros(n, np.int64)])
        return x, y


def _check_delta(delta):
    if not 0.0 <= delta <= 0.5:
        raise OutOfScope("closed forms hold for delta in [0, 1/2]")


def fdelta_curve_closed_form(p: RadialDensity, delta: float, epsilon: float, alpha) -> np.ndarray | float:
    """Robust error with rejection of f_delta when the base classifier is perfect."""
    _check_delta(delta)
    alpha = np.asarray(alpha, dtype=np.float64)
    first = alpha <= 1.0 - 2.0 * delta
    radius = np.where(first, (1.0 - delta) * epsilon, (alpha + delta) * epsilon)
    return p.cdf(radius)


def _segment_ramp(p: RadialDensity, lo: float, hi: float, shift: float, epsilon: float, t: float) -> float:
    # int_lo^hi (1 - (r - shift)/eps)^t p(r) dr, exact on each constant piece
    total = 0.0
    c0 = 1.0 + shift / epsilon
    for a, b, h in zip(p.edges[:-1], p.edges[1:], p.heights):
        a, b = max(a, lo), min(b, hi)
        if b <= a or h == 0:
            continue
        fa = max(c0 - a / epsilon, 0.0) ** (t + 1)
        fb = max(c0 - b / epsilon, 0.0) ** (t + 1)
        total += h * epsilon / (t + 1) * (fa - fb)
    return total


def fdelta_total_loss_closed_form(p: RadialDensity, delta: float, epsilon: float, loss) -> float:
    """Total robust loss of f_delta for a perfect base classifier.

    ``loss`` is a :class:`RejectionLoss` (relative to ``epsilon``) or a callable of
    the absolute perturbation size; callables are integrated by the trapezoid
    rule at spacing ``epsilon / 1e4``.
    """
    _check_delta(delta)
    lo, hi = (1.0 - delta) * epsilon, (1.0 + delta) * epsilon
    base = p.cdf(lo)
    if isinstance(loss, RejectionLoss):
        if loss.kind == "step":
            top = min(hi, (loss.param + delta) * epsilon)
            return float(base + max(p.cdf(top) - base, 0.0))
        return float(base + _segment_ramp(p, lo, hi, delta * epsilon, epsilon, loss.param))
    if hi <= lo:
        return float(base)
    r = np.linspace(lo, hi, int(np.ceil((hi - lo) / (epsilon / 1e4))) + 1)
    dens = _density(p, r)
    vals = np.asarray([loss(v) for v in r - delta * epsilon], dtype=np.float64) * dens
    return float(base + np.trapezoid(vals, r))


def _density(p: RadialDensity, r):
    seg = np.searchsorted(p.edges, r, side="right") - 1
    ok = (seg >= 0) & (seg < len(p.heights))
    return np.where(ok, p.heights[np.clip(seg, 0, len(p.heights) - 1)], 0.0)


def tightness_values(alpha: float, beta: float, epsilon: float) -> dict:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not 0.0 < beta < 0.5:
        raise ValueError("beta must lie in (0, 0.5)")
    return {"lower_bound": beta / 2.0, "epsilon_prime": (1.0 + alpha) * epsilon / 2.0}


# ---------------------------------------------------------------- grid adversary


@dataclass(frozen=True)
class GridProfile:
    """Per-point summary of the grid adversary.

    ``first_reject`` is the smallest ring index (in units of epsilon/steps) at
    which some perturbation is rejected, or ``-1`` if none is.
    """

    misclassified: np.ndarray
    first_reject: np.ndarray
    clean_rejected: np.ndarray
    steps: int
    epsilon: float


def _offsets(d: int, steps: int, epsilon: float):
    ticks = np.arange(-steps, steps + 1)
    if d == 1:
        grid = ticks[:, None]
    elif d == 2:
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        grid = np.stack([a.ravel(), b.ravel()], axis=1)
    else:
        raise UnsupportedDimension(f"grid adversary supports d <= 2, got d={d}")
    ring = np.abs(grid).max(axis=1)
    return grid * (epsilon / steps), ring


def grid_profile(clf, x, y, epsilon: float, steps: int = 1000, chunk_rows: int = 400_000) -> GridProfile:
    """Evaluate ``clf.decide`` on every lattice perturbation of every point."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    offsets, ring = _offsets(x.shape[1], steps, epsilon)
    m = len(offsets)
    per = max(1, chunk_rows // m)
    mis = np.zeros(len(x), dtype=bool)
    first = np.full(len(x), -1, dtype=np.int64)
    clean = np.zeros(len(x), dtype=bool)
    center = int(np.flatnonzero(ring == 0)[0])
    for start in range(0, len(x), per):
        xb = x[start:start + per]
        pts = (xb[:, None, :] + offsets[None]).reshape(-1, x.shape[1])
        dec = np.asarray(clf.decide(pts)).reshape(len(xb), m)
        rej = dec == REJECT
        wrong = ~rej & (dec != y[start:start + per, None])
        mis[start:start + per] = wrong.any(axis=1)
        rings = np.where(rej, ring[None], steps + 1).min(axis=1)
        first[start:start + per] = np.where(rings <= steps, rings, -1)
        clean[start:start + per] = rej[:, center]
    return GridProfile(mis, first, clean, steps, epsilon)


def profile_curve(profile: GridProfile, alphas=None) -> RobustnessCurve:
    """Robust error with rejection read off a grid profile (default: every ring)."""
    if alphas is None:
        alphas = np.arange(profile.steps + 1) / profile.steps
    alphas = np.asarray(alphas, dtype=np.float64)
    limit = np.floor(alphas * profile.steps + 1e-9)
    hit = (profile.first_reject[:, None] >= 0) & (profile.first_reject[:, None] <= limit[None])
    return RobustnessCurve(alphas, (profile.misclassified[:, None] | hit).mean(axis=0), profile.epsilon)


def profile_p_rej(profile: GridProfile) -> float:
    return float(np.mean(profile.clean_rejected & ~profile.misclassified))


def profile_total_loss(profile: GridProfile, loss) -> float:
    """Per-point max of misclassification (1) and rejection cost at the smallest rejected ring."""
    lfun = _relative_loss(loss)
    rel = np.where(profile.first_reject >= 0, profile.first_reject / profile.steps, 0.0)
    rej_cost = np.where(profile.first_reject >= 0, lfun(rel), 0.0)
    return float(np.mean(np.where(profile.misclassified, 1.0, rej_cost)))


def _relative_loss(loss):
    if isinstance(loss, RejectionLoss):
        return lambda a: np.asarray(loss(a), dtype=np.float64)
    return lambda a: np.asarray([loss(v) for v in np.atleast_1d(a)], dtype=np.float64)


def brute_force_total_loss(clf, x, y, epsilon: float, loss, steps: int = 1000) -> float:
    """Total robust loss by exhaustive search over the l-inf lattice.

    ``loss`` is a :class:`RejectionLoss` or a callable of the relative size r/epsilon.
    """
    if steps < 100:
        raise ValueError("grid must split epsilon into at least 100 steps")
    return profile_total_loss(grid_profile(clf, x, y, epsilon, steps), loss)


def brute_force_curve(clf, x, y, epsilon: float, alphas=DEFAULT_ALPHAS, steps: int = 1000) -> RobustnessCurve:
    return profile_curve(grid_profile(clf, x, y, epsilon, steps), alphas)


def brute_force_standard_error(clf, x, y, epsilon: float, steps: int = 1000) -> float:
    """Grid-exact robust error of a classifier that never rejects."""
    return float(grid_profile(clf, x, y, epsilon, steps).misclassified.mean())


def closure_total_loss(profile: GridProfile, loss) -> float:
    """Total loss recovered from the profile's curve through the Stieltjes identity."""
    curve = profile_curve(profile)
    lv = _relative_loss(loss)(curve.alphas)
    return total_robust_loss_general(curve, profile_p_rej(profile), lv)


# ---------------------------------------------------------------- check suites


def _check(name, theoretical, empirical, tolerance, kind="equal", scale=1.0):
    tol = tolerance * scale
    if kind == "equal":
        ok = abs(empirical - theoretical) <= tol
    else:  # empirical must not exceed the theoretical upper bound
        ok = empirical - theoretical <= tol
    return {"name": name, "kind": kind, "theoretical": float(theoretical),
            "empirical": float(empirical), "tolerance": float(tol), "pass": bool(ok)}


def _lemma1_model(seed: int):
    from .train import TrainConfig, train_standard

    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=400)
    x = (np.where(y == 1, 1.0, -1.0) + 0.6 * rng.standard_normal(400))[:, None]
    ds = data.Dataset(x, y, 2)
    model, _ = train_standard(ds, [1, 8, 2], TrainConfig(epochs=15, batch_size=32, lr=0.05, seed=seed))
    return model, ds


def suite_lemma1(tolerance_scale: float = 1.0, seed: int = 0, n: int = 200, steps: int = 1000):
    """Curve-based total loss versus the per-point definition on a CPR-wrapped 1-D net."""
    model, ds = _lemma1_model(seed)
    epsilon = 0.5
    clf = CprClassifier(model, CprConfig(radius=0.15, steps=10, step_size=0.03))
    x, y = ds.x[:n], ds.y[:n]
    profile = grid_profile(clf, x, y, epsilon, steps)
    losses = [RejectionLoss.step(a) for a in (0.0, 0.05, 0.1, 0.5)] + [RejectionLoss.ramp(t) for t in (1, 2, 4)]
    checks = []
    for loss in losses:
        direct = profile_total_loss(profile, loss)
        checks.append(_check(f"lemma1/{loss.label}", direct, closure_total_loss(profile, loss),
                             0.01, scale=tolerance_scale))
    return checks


def _theorem1_instances(seed: int):
    rng = np.random.default_rng(seed)
    y1 = rng.integers(0, 2, size=300)
    x1 = (np.where(y1 == 1, 0.5, -0.5) + 0.5 * rng.standard_normal(300))[:, None]
    g = data.generate(data.SyntheticSpec("two_gaussians", {"separation": 2.0, "sigma": 0.8}, 120, seed))
    a = data.generate(data.SyntheticSpec("annulus", {"r_in": 1.0, "r_out": 2.0}, 120, seed))
    return [
        ("threshold_1d", AnalyticClassifier.threshold(0.1), x1, y1),
        ("linear_2d", AnalyticClassifier.linear([1.0, 1.0], 0.0), g.x, g.y),
        ("circle_2d", AnalyticClassifier.circle(1.0), a.x, a.y),
    ]


def suite_theorem1(tolerance_scale: float = 1.0, seed: int = 0, epsilon: float = 0.3):
    """Robust error with rejection of f_delta never exceeds the base robust error at eps'."""
    checks = []
    for name, base, x, y in _theorem1_instances(seed):
        steps = 400 if x.shape[1] == 1 else 24
        h = epsilon / steps
        m = np.abs(base.margin(x))
        oe_cache: dict[float, float] = {}
        for delta in (0.0, 0.25, 0.5):
            prof = grid_profile(FDelta(base, delta, epsilon), x, y, epsilon, steps)
            for alpha in (0.0, 0.1, 0.5, 1.0):
                eps_p = max((alpha + delta) * epsilon, (1 - delta) * epsilon)
                key = round(eps_p, 12)
                if key not in oe_cache:
                    oe_cache[key] = brute_force_standard_error(base, x, y, eps_p, steps)
                oe = oe_cache[key]
                re = profile_curve(prof, [0.0, alpha, 1.0] if 0 < alpha < 1 else [0.0, 1.0]).at(alpha)
                radii = np.array([delta * epsilon, (alpha + delta) * epsilon, (1 - delta) * epsilon, eps_p])
                # mass whose margin sits within two lattice steps of a critical radius
                tol = float(np.mean(np.any(np.abs(m[:, None] - radii[None]) <= 2 * h * 1.5, axis=1)))
                checks.append(_check(f"theorem1/{name}/delta={delta:g}/alpha={alpha:g}", oe, re,
                                     tol, kind="upper", scale=tolerance_scale))
    return checks


DENSITIES = {
    "uniform": lambda eps: RadialDensity.uniform(2 * eps),
    "two_segment": lambda eps: RadialDensity(np.array([0.0, 0.8 * eps, 2.5 * eps]),
                                             np.array([0.25 / (0.8 * eps), 0.75 / (1.7 * eps)])),
}


def suite_theorem2(tolerance_scale: float = 1.0, epsilon: float = 0.3, n: int = 2000, steps: int = 1000):
    """Closed-form curve and total loss of f_delta against the grid adversary."""
    checks = []
    base = AnalyticClassifier.threshold(0.0)
    losses = [RejectionLoss.step(a) for a in (0.0, 0.05, 0.1)] + [RejectionLoss.ramp(t) for t in (2, 4)]
    for dname, make in DENSITIES.items():
        p = make(epsilon)
        x, y = p.sample_points(n)
        for delta in (0.0, 0.1, 0.25, 0.5):
            prof = grid_profile(FDelta(base, delta, epsilon), x, y, epsilon, steps)
            curve = profile_curve(prof, DEFAULT_ALPHAS)
            for alpha, emp in zip(DEFAULT_ALPHAS, curve.values):
                checks.append(_check(f"theorem2/{dname}/delta={delta:g}/curve/alpha={alpha:g}",
                                     fdelta_curve_closed_form(p, delta, epsilon, alpha), emp, 0.005,
                                     scale=tolerance_scale))
            for loss in losses:
                checks.append(_check(f"theorem2/{dname}/delta={delta:g}/loss/{loss.label}",
                                     fdelta_total_loss_closed_form(p, delta, epsilon, loss),
                                     profile_total_loss(prof, loss), 0.005, scale=tolerance_scale))
    return checks


def suite_tightness(tolerance_scale: float = 1.0, alpha: float = 0.5, beta: float = 0.4,
                    epsilon: float = 0.3, n: int = 10_000, seed: int = 0, steps: int = 200):
    """f_delta with delta=(1-alpha)/2 attains exactly the base robust error at eps'."""
    ds = data.generate(data.SyntheticSpec("tightness", {"alpha": alpha, "beta": beta, "epsilon": epsilon}, n, seed))
    values = tightness_values(alpha, beta, epsilon)
    base = AnalyticClassifier(ds.margin, "shifted_threshold")
    delta = (1.0 - alpha) / 2.0
    prof = grid_profile(FDelta(base, delta, epsilon), ds.x, ds.y, epsilon, steps)
    re = profile_curve(prof, [0.0, alpha, 1.0] if 0 < alpha < 1 else [0.0, 1.0]).at(alpha)
    oe = float(grid_profile(base, ds.x, ds.y, values["epsilon_prime"], steps).misclassified.mean())
    sigma3 = 3.0 * np.sqrt(values["lower_bound"] * (1 - values["lower_bound"]) / n)
    return [
        _check("tightness/re_equals_bound", values["lower_bound"], re, sigma3, scale=tolerance_scale),
        _check("tightness/theorem1_bound", oe, re, 0.0 + 1e-12, kind="upper", scale=tolerance_scale),
        _check("tightness/oe_at_eps_prime", values["lower_bound"], oe, sigma3, scale=tolerance_scale),
    ]


SUITES = {
    "lemma1": suite_lemma1,
    "theorem1": suite_theorem1,
    "theorem2": suite_theorem2,
    "tightness": suite_tightness,
}


def run_suite(name: str, tolerance_scale: float = 1.0) -> list[dict]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn(tolerance_scale=tolerance_scale)]
    try:
        fn = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}") from None
    return fn(tolerance_scale=tolerance_scale)
