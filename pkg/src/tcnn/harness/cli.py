"""Command-line front end.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..layers import ShapeError
from ..network import FingerprintMismatch, grad_check
from ..tensor import derive_rng
from ..zoo import ModelSpec, build, derivation, summary
from .config import ConfigError, load_config
from .run import NumericError, eval_checkpoints, eval_ensemble, finetune, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

# published parameter counts in millions for 1000 classes
PUBLISHED_PARAMS = {
    "T-CNN-1": 20.8,
    "T-CNN-2": 22.1,
    "T-CNN-3": 23.4,
    "T-CNN-4": 24.7,
    "T-CNN-5": 25.1,
    "AlexNet": 60.9,
    "TS-CNN-3": 62.5,
    "sum scores AlexNet + T-CNN-3": 84.3,
}


def params_rows(class_count: int = 1000, fc_width: int = 4096) -> list[tuple[str, int, list[str]]]:
    """(label, exact count, per-layer derivation) for every zoo model plus the score-sum ensemble."""
    rows = []
    specs = [ModelSpec("tcnn", d, class_count=class_count, fc_width=fc_width) for d in range(1, 6)]
    specs += [ModelSpec(f, class_count=class_count, fc_width=fc_width) for f in ("alexnet", "alexnet_short3", "tscnn3")]
    counts = {}
    for spec in specs:
        g = build(spec)
        counts[spec.label] = g.param_count()
        rows.append((spec.label, g.param_count(), derivation(g)))
    ens = counts["T-CNN-3"] + counts["AlexNet"]
    rows.append(("sum scores AlexNet + T-CNN-3", ens, [f"T-CNN-3 {counts['T-CNN-3']:,} + AlexNet {counts['AlexNet']:,}"]))
    return rows


def format_params(rows, show_published: bool = True) -> str:
    lines = []
    for label, count, steps in rows:
        ref = PUBLISHED_PARAMS.get(label) if show_published else None
        tail = ""
        if ref is not None:
            tail = f"  (published {ref:.1f}M, {100 * (count / 1e6 - ref) / ref:+.2f}%)"
        lines.append(f"{label:<30} {count / 1e6:8.3f}M  {count:>12,}{tail}")
        lines += [f"    {s}" for s in steps]
    return "\n".join(lines)


def _spec_from_args(a) -> ModelSpec:
    return ModelSpec(
        family=a.family,
        depth=a.depth,
        energy_mode=a.energy,
        class_count=a.classes,
        fc_width=a.fc_width,
        scale=a.scale,
        lrn=not a.no_lrn,
    )


def _overrides(a) -> dict[str, str]:
    out = {}
    for item in getattr(a, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if getattr(a, "seed", None) is not None:
        out["run.seed"] = str(a.seed)
    return out


def _print_record(r, out=sys.stdout):
    print(f"top1 {r.top1:.4f}  loss {r.loss:.4f}", file=out)


def cmd_train(a) -> int:
    cfg = load_config(a.config, _overrides(a))
    res = train(cfg, a.out, log=_print_record if a.verbose else None)
    print(f"final test top1 {res.final.top1:.4f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_finetune(a) -> int:
    cfg = load_config(a.config, _overrides(a))
    res = finetune(cfg, a.source, a.out, log=_print_record if a.verbose else None)
    print(f"final test top1 {res.final.top1:.4f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(a) -> int:
    cfg = load_config(a.config, _overrides(a))
    report = eval_checkpoints(a.checkpoint, cfg)
    text = report.format()
    print(text)
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        (Path(a.out) / "eval.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_eval_ensemble(a) -> int:
    cfg = load_config(a.config, _overrides(a))
    rec = eval_ensemble(a.checkpoint, cfg)
    print(f"ensemble of {len(a.checkpoint)}: top1 {rec.top1:.4f}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    spec = _spec_from_args(a)
    rng = derive_rng(a.seed if a.seed is not None else 0, 0)
    g = build(spec, rng)
    size = a.size or (32 if spec.family == "tcnn" and spec.scale == "desk" else spec.nominal_size)
    x = rng.standard_normal((2, 3, size, size))
    labels = rng.integers(0, spec.class_count, size=2)
    t = time.perf_counter()
    report = grad_check(g, x, labels, a.epsilon, a.threshold, rng=rng, max_entries=a.max_entries)
    print(f"{spec.label} ({spec.scale} scale, {g.param_count():,} parameters, input {size}x{size})")
    print(report.format())
    print(f"{time.perf_counter() - t:.1f}s")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_params(a) -> int:
    t = time.perf_counter()
    print(format_params(params_rows(a.classes, a.fc_width), show_published=a.classes == 1000 and a.fc_width == 4096))
    print(f"({time.perf_counter() - t:.3f}s)")
    return EXIT_OK


def cmd_summary(a) -> int:
    print(summary(build(_spec_from_args(a)), a.size))
    return EXIT_OK


def _model_args(p, classes=5, scale="desk"):
    p.add_argument("--family", default="tcnn", choices=["tcnn", "alexnet", "alexnet_short3", "tscnn3"])
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--energy", default="average", choices=["average", "max"])
    p.add_argument("--classes", type=int, default=classes)
    p.add_argument("--fc-width", type=int, default=4096)
    p.add_argument("--scale", default=scale, choices=["paper", "desk"])
    p.add_argument("--no-lrn", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcnn", description="Texture CNN training and verification harness")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True)
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train from scratch")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with a new classifier")
    common(p)
    p.add_argument("--source", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="top-1 accuracy; one checkpoint per fold gives mean +/- std")
    common(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("eval-ensemble", help="softmax score-sum ensemble")
    common(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.set_defaults(fn=cmd_eval_ensemble)

    p = sub.add_parser("gradcheck", help="central-difference check of a whole network")
    common(p, config=False)
    _model_args(p)
    p.add_argument("--size", type=int)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts of every model")
    common(p, config=False)
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--fc-width", type=int, default=4096)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("summary", help="layer table of one model")
    common(p, config=False)
    _model_args(p, classes=1000, scale="paper")
    p.add_argument("--size", type=int)
    p.set_defaults(fn=cmd_summary)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        with threadpool_limits(args.threads):
            return args.fn(args)
    except (ConfigError, FingerprintMismatch, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
