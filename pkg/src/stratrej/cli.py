"""Command-line front end: ``stratrej {train,evaluate,oracle,plot}``.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, nn, oracle
from .attacks import INNER_ATTACKS, OUTER_ATTACKS, PgdConfig, ensemble_evaluate
from .selective import (BaseClassifier, ConfidenceClassifier, ConfidenceConfig, CprClassifier,
                        CprConfig, calibrate_confidence, calibrate_cpr)
from .train import TRAINERS, TrainConfig, write_log_csv

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

MODEL_FILE = "model.json"
LOG_FILE = "train_log.csv"
OUTCOMES_FILE = "outcomes.csv"
OUTCOMES_UNSEEN_FILE = "outcomes_unseen.csv"
CURVE_SEEN_FILE = "curve_seen.csv"
CURVE_UNSEEN_FILE = "curve_unseen.csv"
METRICS_FILE = "metrics.json"
ORACLE_FILE = "oracle.json"
SVG_FILE = "curves.svg"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


def _section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise ConfigError(f"missing required field '{name}'")
    sec = cfg[name]
    if not isinstance(sec, dict):
        raise ConfigError(f"field '{name}' must be an object")
    return sec


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for name in ("dataset", "model"):
        _section(cfg, name)
    return cfg


def build_dataset(cfg: dict):
    """Return ``(train, val, test)`` according to the ``dataset`` section."""
    sec = dict(_section(cfg, "dataset"))
    seed = int(cfg.get("seed", 0))
    family = sec.pop("family", None)
    if family is None:
        raise ConfigError("missing required field 'dataset.family'")
    fractions = sec.pop("split", (0.8, 0.1, 0.1))
    try:
        if family == "idx":
            for key in ("images", "labels"):
                if key not in sec:
                    raise ConfigError(f"missing required field 'dataset.{key}'")
            ds = data.load_idx(sec["images"], sec["labels"])
            if "n" in sec:
                ds = ds.subset(np.arange(min(int(sec["n"]), ds.n)))
        else:
            n = int(sec.pop("n", 2000))
            ds = data.generate(data.SyntheticSpec(family, sec, n, seed))
        return data.split(ds, fractions, seed)
    except ConfigError:
        raise
    except (ValueError, OSError) as exc:
        raise ConfigError(f"dataset: {exc}") from None


def _widths(cfg: dict) -> list[int]:
    widths = _section(cfg, "model").get("widths")
    if not isinstance(widths, list) or len(widths) < 2:
        raise ConfigError("field 'model.widths' must list at least input and output sizes")
    return [int(w) for w in widths]


def _train_config(cfg: dict) -> tuple[str, TrainConfig]:
    sec = dict(cfg.get("train", {}))
    method = sec.pop("method", "standard")
    if method not in TRAINERS:
        raise ConfigError(f"field 'train.method' must be one of {sorted(TRAINERS)}")
    sec.setdefault("seed", int(cfg.get("seed", 0)))
    try:
        return method, TrainConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def cmd_train(config_path, out_dir) -> int:
    cfg = load_config(config_path)
    train_ds, _, test_ds = build_dataset(cfg)
    widths = _widths(cfg)
    if widths[0] != train_ds.d or widths[-1] != train_ds.k:
        raise ConfigError(f"model.widths {widths} does not match data (d={train_ds.d}, k={train_ds.k})")
    method, tcfg = _train_config(cfg)
    model, log = TRAINERS[method](train_ds, widths, tcfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nn.save(model, out / MODEL_FILE)
    write_log_csv(log, out / LOG_FILE)
    acc = float(np.mean(nn.predict(model, test_ds.x) == test_ds.y))
    print(f"clean test accuracy: {acc:.4f}")
    return EXIT_OK


def _selective(cfg: dict, model, val_ds, box):
    sec = dict(cfg.get("selective", {"kind": "base"}))
    kind = sec.get("kind", "base")
    if kind == "base":
        return BaseClassifier(model), None
    p_rej = float(sec.get("p_rej", 0.05))
    if kind == "cpr":
        steps = int(sec.get("steps", 10))
        if "radius" in sec:
            radius = float(sec["radius"])
            step_size = float(sec.get("step_size", radius / 4 if radius > 0 else 1.0))
            return CprClassifier(model, CprConfig(radius, steps, step_size, box)), None
        radii = sec.get("radii")
        if not radii:
            raise ConfigError("field 'selective.radius' or 'selective.radii' is required for cpr")
        c, rate = calibrate_cpr(model, val_ds.x, val_ds.y, p_rej, radii, steps, sec.get("step_size"), box)
        return CprClassifier(model, c), rate
    if kind == "confidence":
        if "threshold" in sec:
            return ConfidenceClassifier(model, ConfidenceConfig(float(sec["threshold"]))), None
        return ConfidenceClassifier(model, calibrate_confidence(model, val_ds.x, val_ds.y, p_rej)), None
    raise ConfigError("field 'selective.kind' must be one of ['base', 'confidence', 'cpr']")


def _attack_settings(cfg: dict, clf):
    sec = _section(cfg, "attack")
    if "epsilon" not in sec:
        raise ConfigError("missing required field 'attack.epsilon'")
    eps = float(sec["epsilon"])
    eps_unseen = float(sec.get("epsilon_unseen", eps))
    if eps <= 0:
        raise ConfigError("field 'attack.epsilon' must be positive")
    if eps_unseen < eps:
        raise ConfigError("field 'attack.epsilon_unseen' must be >= attack.epsilon")
    alphas = [float(a) for a in sec.get("alphas", metrics.DEFAULT_ALPHAS)]
    if alphas != sorted(alphas) or alphas[0] != 0.0 or alphas[-1] != 1.0 or len(set(alphas)) != len(alphas):
        raise ConfigError("field 'attack.alphas' must increase from 0 to 1")
    if isinstance(clf, CprClassifier):
        inner_default, outer_default = list(INNER_ATTACKS), ["hcmoa", "chcmoa"]
    else:
        inner_default, outer_default = ["lcia"], ["hcmoa"]
    inner = list(sec.get("inner", inner_default))
    outer = list(sec.get("outer", outer_default))
    for name in inner:
        if name not in INNER_ATTACKS:
            raise ConfigError(f"field 'attack.inner' has unknown attack {name!r}")
    for name in outer:
        if name not in OUTER_ATTACKS:
            raise ConfigError(f"field 'attack.outer' has unknown attack {name!r}")
    try:
        pgd = PgdConfig(int(sec.get("iterations", 200)), float(sec.get("momentum", 0.9)),
                        int(sec.get("restarts", 5)), sec.get("step_sizes"),
                        int(sec.get("seed", cfg.get("seed", 0))))
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from None
    return {"epsilon": eps, "epsilon_unseen": eps_unseen, "alphas": alphas, "inner": inner,
            "outer": outer, "pgd": pgd, "max_points": sec.get("max_points"),
            "workers": int(sec.get("workers", 1)), "tau": float(sec.get("tau", 100.0))}


def _losses(cfg: dict) -> list[metrics.RejectionLoss]:
    sec = cfg.get("losses", {"step": [0.0, 0.05, 0.1], "ramp": [2, 4]})
    try:
        return ([metrics.RejectionLoss.step(a) for a in sec.get("step", [])]
                + [metrics.RejectionLoss.ramp(t) for t in sec.get("ramp", [])])
    except ValueError as exc:
        raise ConfigError(f"losses: {exc}") from None


def _with_box(pgd: PgdConfig, box) -> PgdConfig:
    return PgdConfig(pgd.iterations, pgd.momentum, pgd.restarts, pgd.step_sizes, pgd.seed, box)


def _budget_report(outcomes, alphas, eps, losses):
    curve = metrics.robustness_curve(outcomes, alphas, eps)
    return curve, {
        "epsilon": eps,
        "curve": {f"{a:g}": float(s) for a, s in zip(curve.alphas, curve.values)},
        "total_robust_loss": {loss.label: metrics.total_robust_loss(curve, loss) for loss in losses},
        "traditional": metrics.traditional_metrics(outcomes),
    }


def cmd_evaluate(config_path, model_path, out_dir) -> int:
    cfg = load_config(config_path)
    _, val_ds, test_ds = build_dataset(cfg)
    try:
        model = nn.load(model_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from None
    if model.d != test_ds.d or model.k != test_ds.k:
        raise ConfigError(f"model (d={model.d}, k={model.k}) does not match data (d={test_ds.d}, k={test_ds.k})")
    clf, achieved = _selective(cfg, model, val_ds, test_ds.box)
    att = _attack_settings(cfg, clf)
    losses = _losses(cfg)
    x, y = test_ds.x, test_ds.y
    if att["max_points"] is not None:
        x, y = x[:int(att["max_points"])], y[:int(att["max_points"])]
    pgd = _with_box(att["pgd"], test_ds.box)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"selective": clf.describe(), "n_points": int(len(x)), "alphas": att["alphas"],
              "attacks": {"inner": att["inner"], "outer": att["outer"]}}
    if achieved is not None:
        report["selective"]["calibrated_rejection_rate"] = achieved
    budgets = [("seen", att["epsilon"], OUTCOMES_FILE, CURVE_SEEN_FILE),
               ("unseen", att["epsilon_unseen"], OUTCOMES_UNSEEN_FILE, CURVE_UNSEEN_FILE)]
    for tag, eps, outcomes_file, curve_file in budgets:
        outcomes = ensemble_evaluate(clf, x, y, eps, att["alphas"], att["inner"], att["outer"], pgd,
                                     att["tau"], workers=att["workers"])
        metrics.write_outcomes_csv(outcomes, out / outcomes_file)
        curve, report[tag] = _budget_report(outcomes, att["alphas"], eps, losses)
        metrics.write_curve_csv(curve, out / curve_file)
        print(f"[{tag}] eps={eps:g} robust acc with detection="
              f"{report[tag]['traditional']['robust_acc_with_detection']:.4f}")
    with open(out / METRICS_FILE, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_oracle(suite: str, out_dir, tolerance_scale: float = 1.0) -> int:
    if suite not in set(oracle.SUITES) | {"all"}:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(oracle.SUITES) + ['all']}")
    checks = oracle.run_suite(suite, tolerance_scale)
    for c in checks:
        status = "PASS" if c["pass"] else "FAIL"
        print(f"{status} {c['name']}: theoretical={c['theoretical']:.6g} "
              f"empirical={c['empirical']:.6g} tol={c['tolerance']:.3g}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ORACLE_FILE, "w") as fh:
        json.dump({"suite": suite, "checks": checks}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK if all(c["pass"] for c in checks) else EXIT_CHECK


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(curves, labels, width: int = 480, height: int = 320) -> str:
    """Overlay of robust accuracy ``1 - s(alpha)`` against alpha."""
    left, right, top, bottom = 50, 150, 20, 40
    pw, ph = width - left - right, height - top - bottom

    def sx(a):
        return left + a * pw

    def sy(v):
        return top + (1.0 - v) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
             f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">alpha</text>',
             f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {top + ph / 2:.1f})">robust accuracy</text>']
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{sx(tick):.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{tick:g}</text>')
        parts.append(f'<text x="{left - 4}" y="{sy(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick:g}</text>')
    for i, (curve, label) in enumerate(zip(curves, labels)):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(1.0 - s):.2f}" for a, s in zip(curve.alphas, curve.values))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 14 + 16 * i
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 34}" y="{ly}" font-size="11">{_escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_plot(curve_paths, out_dir, labels=None) -> int:
    if not curve_paths:
        raise ConfigError("need at least one curve file")
    curves = []
    for path in curve_paths:
        try:
            curves.append(metrics.read_curve_csv(path))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    labels = labels or [Path(p).stem for p in curve_paths]
    if len(labels) != len(curves):
        raise ConfigError("need one label per curve file")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / SVG_FILE).write_text(render_svg(curves, labels))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratrej", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a base model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="attack a (selective) model and compute curves and losses")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle", help="run analytic consistency checks")
    p.add_argument("--suite", default="all")
    p.add_argument("--out", default=".")
    p.add_argument("--tolerance-scale", type=float, default=1.0, help=argparse.SUPPRESS)

    p = sub.add_parser("plot", help="overlay robustness curves as SVG")
    p.add_argument("curves", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="*")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(args.config, args.model, args.out)
        if args.command == "oracle":
            return cmd_oracle(args.suite, args.out, args.tolerance_scale)
        return cmd_plot(args.curves, args.out, args.labels)
    except (ConfigError, nn.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
