"""Adaptive attacks on selective classifiers.

Inner attacks look for a rejected point within a small radius; outer attacks
look for an accepted, misclassified point within the full budget. All of them
run through :func:`pgd_optimize`, a momentum PGD solver over the l-inf ball
with one zero-initialised restart plus several random restarts and a list of
base step sizes, keeping the best iterate seen anywhere.

Momentum update used throughout::

    v <- momentum * v + sign(grad)
    z <- Proj(z + lr * v)

Attacks whose objective involves the CPR map T use a straight-through
(BPDA) gradient: T is evaluated exactly on the forward pass and its Jacobian
is treated as the identity on the backward pass.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .selective import REJECT, CprClassifier, CprConfig, SelectiveClassifier, cpr_transport, project_linf

INNER_ATTACKS = ("lcia", "clcia", "pdia")
OUTER_ATTACKS = ("hcmoa", "chcmoa", "conf_outer")
NEEDS_TRANSPORT = {"clcia", "pdia", "chcmoa"}
UPDATE_RULE = "v <- momentum*v + sign(grad); z <- proj(z + lr*v)"

Objective = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class PgdConfig:
    iterations: int = 200
    momentum: float = 0.9
    restarts: int = 5  # random restarts; a zero-init restart is always added
    step_sizes: tuple[float, ...] | None = None  # None: radius/3, radius/10, radius/30
    seed: int = 0
    box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        if self.step_sizes is not None:
            if len(self.step_sizes) == 0:
                raise ValueError("step_sizes must be nonempty")
            object.__setattr__(self, "step_sizes", tuple(float(s) for s in self.step_sizes))

    def steps_for(self, radius: float) -> tuple[float, ...]:
        if self.step_sizes is not None:
            return self.step_sizes
        return (radius / 3, radius / 10, radius / 30)


@dataclass
class PgdResult:
    x: np.ndarray  # (n, d) best iterate per point
    value: np.ndarray  # (n,)
    candidates: np.ndarray  # (n, S, d) best iterate per point and step size
    candidate_values: np.ndarray  # (n, S)
    trace: np.ndarray  # (iterations + 1, n) running best value per point


@dataclass
class AttackResult:
    """Selected adversarial input per point plus every candidate the attack produced."""

    x: np.ndarray
    value: np.ndarray
    candidates: np.ndarray  # (n, C, d)
    target: np.ndarray | None = None


def pgd_optimize(objective: Objective, x, radius: float, cfg: PgdConfig) -> PgdResult:
    """Maximise ``objective`` over the l-inf ball of ``radius`` around each row of ``x``.

    ``objective(z, rows)`` gets a stacked batch ``z`` and, for each of its rows,
    the index of the clean point it belongs to; it returns per-row values and
    gradients.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    steps = np.asarray(cfg.steps_for(radius), dtype=np.float64)
    n_steps = len(steps)
    if radius == 0:
        value, _ = objective(x, np.arange(n))
        return PgdResult(x.copy(), value, np.repeat(x[:, None, :], n_steps, axis=1),
                         np.repeat(value[:, None], n_steps, axis=1), value[None, :])

    rng = np.random.default_rng(cfg.seed)
    direction = rng.standard_normal((n, cfg.restarts, d))
    scale = rng.uniform(size=(n, cfg.restarts, 1))
    norms = np.abs(direction).max(axis=2, keepdims=True)
    random_init = scale * radius * direction / np.where(norms > 0, norms, 1.0)
    init = np.concatenate([np.zeros((n, 1, d)), random_init], axis=1)  # (n, R, d)
    n_restarts = init.shape[1]

    shape = (n, n_restarts, n_steps)
    rows = np.broadcast_to(np.arange(n)[:, None, None], shape).reshape(-1)
    lr = np.broadcast_to(steps[None, None, :], shape).reshape(-1, 1)
    center = x[rows]
    z = np.broadcast_to((x[:, None, :] + init)[:, :, None, :], shape + (d,)).reshape(-1, d)
    z = project_linf(z, center, radius, cfg.box)

    value, grad = objective(z, rows)
    best_value = value.copy()
    best_z = z.copy()
    velocity = np.zeros_like(z)
    trace = [best_value.reshape(n, -1).max(axis=1)]
    for _ in range(cfg.iterations):
        velocity = cfg.momentum * velocity + np.sign(grad)
        z = project_linf(z + lr * velocity, center, radius, cfg.box)
        value, grad = objective(z, rows)
        better = value > best_value
        best_value = np.where(better, value, best_value)
        best_z[better] = z[better]
        trace.append(best_value.reshape(n, -1).max(axis=1))

    # per step size: best over restarts (first wins ties, i.e. the zero init)
    bv = best_value.reshape(n, n_restarts, n_steps)
    bz = best_z.reshape(n, n_restarts, n_steps, d)
    pick = np.argmax(bv, axis=1)  # (n, S)
    ii = np.arange(n)[:, None]
    ss = np.arange(n_steps)[None, :]
    cand_values = bv[ii, pick, ss]
    candidates = bz[ii, pick, ss]
    overall = np.argmax(cand_values, axis=1)
    return PgdResult(candidates[np.arange(n), overall], cand_values[np.arange(n), overall],
                     candidates, cand_values, np.array(trace))


# objective pieces on logits: (values, d values / d logits)

def _low_confidence(a: np.ndarray, tau: float):
    """Smooth -log(max prob): -(1/tau) lse(tau a) + lse(a)."""
    value = -nn.logsumexp(tau * a) / tau + nn.logsumexp(a)
    return value, nn.softmax(a) - nn.softmax(tau * a)


def _log_prob(a: np.ndarray, target: np.ndarray):
    rows = np.arange(a.shape[0])
    logp = nn.log_softmax(a)
    grad = -np.exp(logp)
    grad[rows, target] += 1.0
    return logp[rows, target], grad


def _term(model, z, piece):
    return nn.value_and_grad_input(model, z, nn.LossSpec.custom(piece))


def bpda_grad(model: nn.Mlp, x, cfg: CprConfig, fn):
    """Straight-through gradient of ``fn(T(x))``.

    ``fn(u)`` returns values and gradients at ``u``. The forward pass evaluates
    ``T`` exactly; the gradient at ``T(x)`` is passed back to ``x`` unchanged.
    """
    u = cpr_transport(model, x, cfg)
    return fn(u)


def make_objective(model: nn.Mlp, kind: str, tau: float = 100.0, target=None,
                   cpr: CprConfig | None = None) -> Objective:
    """Build the stacked-batch objective for one attack kind.

    ``target`` holds one class per clean point (indexed by the ``rows`` argument).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if kind in NEEDS_TRANSPORT and cpr is None:
        raise ValueError(f"{kind} needs the CPR configuration to evaluate T")
    target = None if target is None else np.asarray(target)

    def lowconf(z, rows):
        return _term(model, z, lambda a: _low_confidence(a, tau))

    def logprob(z, rows):
        return _term(model, z, lambda a: _log_prob(a, target[rows]))

    if kind == "lcia":
        return lowconf
    if kind in ("hcmoa", "conf_outer"):
        return logprob

    def through_t(fn):
        return lambda z, rows: bpda_grad(model, z, cpr, lambda u: fn(u, rows))

    if kind == "clcia":
        first, second, sign = lowconf, through_t(lowconf), 1.0
    elif kind == "pdia":
        first, second, sign = logprob, through_t(logprob), -1.0
    elif kind == "chcmoa":
        first, second, sign = logprob, through_t(logprob), 1.0
    else:
        raise ValueError(f"unknown attack {kind!r}")

    def combined(z, rows):
        v1, g1 = first(z, rows)
        v2, g2 = second(z, rows)
        return v1 + sign * v2, g1 + sign * g2

    return combined


def _single(x, result: AttackResult) -> AttackResult:
    if np.asarray(x).ndim == 1:
        return AttackResult(result.x[0], result.value[0], result.candidates,
                            None if result.target is None else result.target[0])
    return result


def _untargeted(model, kind, x, radius, cfg, tau, cpr):
    res = pgd_optimize(make_objective(model, kind, tau, cpr=cpr), x, radius, cfg)
    return _single(x, AttackResult(res.x, res.value, res.candidates))


def _multi_target(model, kind, x, targets, radius, cfg, tau, cpr):
    """Run one targeted optimisation per column of ``targets`` and keep the best."""
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = xs.shape[0]
    runs = [pgd_optimize(make_objective(model, kind, tau, target=targets[:, c], cpr=cpr), xs, radius, cfg)
            for c in range(targets.shape[1])]
    values = np.stack([r.value for r in runs], axis=1)
    pick = np.argmax(values, axis=1)
    rows = np.arange(n)
    chosen_x = np.stack([r.x for r in runs], axis=1)[rows, pick]
    candidates = np.concatenate([r.candidates for r in runs], axis=1)
    return _single(x, AttackResult(chosen_x, values[rows, pick], candidates, targets[rows, pick]))


def _other_classes(y, k: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    return (y[:, None] + np.arange(1, k)[None, :]) % k


def lcia(model, x, radius, cfg: PgdConfig, tau: float = 100.0) -> AttackResult:
    """Low-confidence inner attack: push the smoothed top probability down."""
    return _untargeted(model, "lcia", x, radius, cfg, tau, None)


def clcia(model, x, radius, cfg: PgdConfig, cpr: CprConfig, tau: float = 100.0) -> AttackResult:
    """Low confidence at both z and T(z)."""
    return _untargeted(model, "clcia", x, radius, cfg, tau, cpr)


def pdia(model, x, radius, cfg: PgdConfig, cpr: CprConfig) -> AttackResult:
    """Prediction disagreement: for every class j maximise log h_j(z) - log h_j(T(z))."""
    n = np.atleast_2d(x).shape[0]
    targets = np.broadcast_to(np.arange(model.k)[None, :], (n, model.k))
    return _multi_target(model, "pdia", x, targets, radius, cfg, 100.0, cpr)


def hcmoa(model, x, y, radius, cfg: PgdConfig) -> AttackResult:
    """High-confidence misclassification: maximise log h_j for each wrong class j."""
    return _multi_target(model, "hcmoa", x, _other_classes(y, model.k), radius, cfg, 100.0, None)


def chcmoa(model, x, y, radius, cfg: PgdConfig, cpr: CprConfig) -> AttackResult:
    """Consistent high-confidence misclassification: log h_j(z) + log h_j(T(z))."""
    return _multi_target(model, "chcmoa", x, _other_classes(y, model.k), radius, cfg, 100.0, cpr)


def conf_outer(model, x, y, radius, cfg: PgdConfig) -> AttackResult:
    """Outer attack against confidence thresholds; same objective as :func:`hcmoa`."""
    return _multi_target(model, "conf_outer", x, _other_classes(y, model.k), radius, cfg, 100.0, None)


def run_attack(name: str, clf: SelectiveClassifier, x, y, radius: float, cfg: PgdConfig,
               tau: float = 100.0) -> AttackResult:
    model = clf.model
    cpr = clf.cfg if isinstance(clf, CprClassifier) else None
    if name in NEEDS_TRANSPORT and cpr is None:
        raise ValueError(f"attack {name!r} only applies to CPR classifiers")
    if name == "lcia":
        return lcia(model, x, radius, cfg, tau)
    if name == "clcia":
        return clcia(model, x, radius, cfg, cpr, tau)
    if name == "pdia":
        return pdia(model, x, radius, cfg, cpr)
    if name == "hcmoa":
        return hcmoa(model, x, y, radius, cfg)
    if name == "chcmoa":
        return chcmoa(model, x, y, radius, cfg, cpr)
    if name == "conf_outer":
        return conf_outer(model, x, y, radius, cfg)
    raise ValueError(f"unknown attack {name!r}")


@dataclass
class AttackOutcome:
    """Per-point success flags from which robustness curves are built.

    ``inner_success[i]`` says a rejected point was found within ``alphas[i] * epsilon``;
    ``outer_success`` says an accepted, misclassified point was found within
    ``epsilon`` (the clean point itself counts). ``by_attack`` keeps the same
    flags for each individual attack.
    """

    clean_correct: bool
    clean_rejected: bool
    outer_success: bool
    inner_success: tuple[bool, ...]
    alphas: tuple[float, ...]
    by_attack: dict = field(default_factory=dict)


def _check_inside(cands, x, radius, box):
    dist = np.abs(cands - x[:, None, :]).max(axis=2)
    assert np.all(dist <= radius * (1 + 1e-12) + 1e-15), "attack left its ball"
    if box is not None:
        assert np.all((cands >= box[0]) & (cands <= box[1])), "attack left the domain box"


def _decide_candidates(clf, cands):
    n, c, d = cands.shape
    return clf.decide(cands.reshape(n * c, d)).reshape(n, c)


def _evaluate_chunk(clf, x, y, epsilon, alphas, inner, outer, cfg, tau, early_exit):
    n = x.shape[0]
    clean = clf.decide(x)
    clean_rejected = clean == REJECT
    clean_correct = clean == y
    clean_wrong = ~clean_rejected & ~clean_correct

    outer_flags = {}
    for name in outer:
        res = run_attack(name, clf, x, y, epsilon, cfg, tau)
        _check_inside(res.candidates, x, epsilon, cfg.box)
        dec = _decide_candidates(clf, res.candidates)
        hit = ((dec != REJECT) & (dec != y[:, None])).any(axis=1)
        outer_flags[name] = hit | clean_wrong
    outer_success = np.logical_or.reduce(list(outer_flags.values()))

    inner_flags = {name: np.zeros((n, len(alphas)), dtype=bool) for name in inner}
    combined = np.zeros((n, len(alphas)), dtype=bool)
    for i, alpha in enumerate(alphas):
        radius = alpha * epsilon
        prev = combined[:, i - 1] if i > 0 else np.zeros(n, dtype=bool)
        combined[:, i] = prev | clean_rejected
        for name in inner:
            own_prev = inner_flags[name][:, i - 1] if i > 0 else np.zeros(n, dtype=bool)
            flags = own_prev | clean_rejected
            if radius > 0:
                todo = ~combined[:, i] if early_exit else ~flags
                idx = np.flatnonzero(todo)
                if idx.size:
                    res = run_attack(name, clf, x[idx], y[idx], radius, cfg, tau)
                    _check_inside(res.candidates, x[idx], radius, cfg.box)
                    dec = _decide_candidates(clf, res.candidates)
                    flags[idx] |= (dec == REJECT).any(axis=1)
            inner_flags[name][:, i] = flags
            combined[:, i] |= flags

    outcomes = []
    for p in range(n):
        by_attack = {name: bool(outer_flags[name][p]) for name in outer}
        by_attack.update({name: tuple(bool(v) for v in inner_flags[name][p]) for name in inner})
        outcomes.append(AttackOutcome(bool(clean_correct[p]), bool(clean_rejected[p]),
                                      bool(outer_success[p]), tuple(bool(v) for v in combined[p]),
                                      tuple(alphas), by_attack))
    return outcomes


def ensemble_evaluate(clf: SelectiveClassifier, x, y, epsilon: float, alphas: Sequence[float],
                      inner: Sequence[str] = INNER_ATTACKS, outer: Sequence[str] = ("hcmoa", "chcmoa"),
                      cfg: PgdConfig | None = None, tau: float = 100.0, early_exit: bool = True,
                      chunk_size: int = 256, workers: int = 1) -> list[AttackOutcome]:
    """Run every inner attack at each radius ``alpha * epsilon`` and every outer
    attack at ``epsilon``; a point counts as broken if any attack succeeds.

    Inner successes propagate to larger alphas. With ``early_exit`` a point
    stops being attacked at a radius once some attack has succeeded there,
    which leaves the ensemble flags unchanged but makes per-attack flags
    incomplete. Points are processed in fixed-size chunks, each with its own
    derived seed, so results do not depend on ``workers``.
    """
    if not inner or not outer:
        raise ValueError("need at least one inner and one outer attack")
    alphas = tuple(float(a) for a in alphas)
    if any(a < 0 or a > 1 for a in alphas) or list(alphas) != sorted(alphas):
        raise ValueError("alphas must be sorted and lie in [0, 1]")
    cfg = cfg or PgdConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    starts = list(range(0, x.shape[0], chunk_size))
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(starts))

    def job(i):
        s = starts[i]
        sub = PgdConfig(cfg.iterations, cfg.momentum, cfg.restarts, cfg.step_sizes,
                        int(seeds[i].generate_state(1)[0]), cfg.box)
        return _evaluate_chunk(clf, x[s:s + chunk_size], y[s:s + chunk_size], epsilon, alphas,
                               tuple(inner), tuple(outer), sub, tau, early_exit)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(job, range(len(starts))))
    else:
        chunks = [job(i) for i in range(len(starts))]
    return [o for chunk in chunks for o in chunk]
