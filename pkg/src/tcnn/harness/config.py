"""Flat ``key = value`` run configuration with dotted keys."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from ..data import PreprocessSpec, SplitPlan
from ..optim import SgdConfig, make_config
from ..zoo import ModelSpec


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, str] = {
    "run.seed": "",
    "run.epochs": "10",
    "run.eval_every": "1",
    "run.timing": "false",
    "model.family": "tcnn",
    "model.depth": "3",
    "model.energy_mode": "average",
    "model.class_count": "auto",
    "model.fc_width": "4096",
    "model.scale": "paper",
    "model.lrn": "true",
    "model.grouped": "auto",
    "model.dropout": "0.5",
    "model.init": "auto",
    "optim.preset": "scratch",
    "optim.base_lr": "auto",
    "optim.lr_scale": "1",
    "optim.momentum": "0.9",
    "optim.weight_decay": "0.0005",
    "optim.decay_biases": "true",
    "optim.batch_size": "auto",
    "optim.lr_schedule": "",
    "data.source": "",
    "split.strategy": "fixed",
    "split.k": "10",
    "split.index": "0",
    "split.seed": "0",
    "split.train_fraction": "0.5",
    "split.use_val": "false",
    "preprocess.resize": "",
    "preprocess.crop": "",
    "preprocess.crop_policy": "random",
    "preprocess.flip": "false",
    "preprocess.mean": "auto",
    "finetune.reset_head": "auto",
    "finetune.head_lr_mult": "10",
    "checkpoint.in": "",
}


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = value
    return values


def _bool(key, v):
    if v.lower() in ("true", "yes", "1", "on"):
        return True
    if v.lower() in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _size(key, v):
    if not v:
        return None
    parts = v.lower().replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: expected 'H' or 'HxW', got {v!r}") from None
    return dims * 2 if len(dims) == 1 else dims


@dataclass
class RunConfig:
    raw: dict[str, str]
    model: ModelSpec
    optim: SgdConfig
    data: str
    split: SplitPlan
    preprocess: PreprocessSpec
    epochs: int
    seed: int
    eval_every: int = 1
    timing: bool = False
    checkpoint_in: str = ""
    mean_auto: bool = True
    class_count_auto: bool = False
    lr_auto: bool = True
    batch_auto: bool = True
    reset_head: str = "auto"
    head_lr_mult: float = 10.0

    def with_classes(self, k: int) -> "RunConfig":
        return replace(self, model=self.model.with_classes(k))


def build_config(values: dict[str, str], overrides: dict[str, str] | None = None) -> RunConfig:
    for key in overrides or {}:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
    v = {**DEFAULTS, **values, **(overrides or {})}
    try:
        if not v["run.seed"]:
            raise ConfigError("run.seed is mandatory")
        seed = int(v["run.seed"])
        class_auto = v["model.class_count"] == "auto"
        model = ModelSpec(
            family=v["model.family"],
            depth=int(v["model.depth"]),
            energy_mode=v["model.energy_mode"],
            class_count=1 if class_auto else int(v["model.class_count"]),
            fc_width=int(v["model.fc_width"]),
            scale=v["model.scale"],
            lrn=_bool("model.lrn", v["model.lrn"]),
            grouped=None if v["model.grouped"] == "auto" else _bool("model.grouped", v["model.grouped"]),
            dropout=float(v["model.dropout"]),
            init=None if v["model.init"] == "auto" else v["model.init"],
        )
        preset = make_config(v["optim.preset"])
        lr_auto = v["optim.base_lr"] == "auto"
        base_lr = preset.base_lr if lr_auto else float(v["optim.base_lr"])
        schedule = []
        if v["optim.lr_schedule"]:
            for part in v["optim.lr_schedule"].split(","):
                step, mult = part.split(":")
                schedule.append((int(step), float(mult)))
        optim = SgdConfig(
            base_lr=base_lr * float(v["optim.lr_scale"]),
            momentum=float(v["optim.momentum"]),
            weight_decay=float(v["optim.weight_decay"]),
            lr_schedule=schedule,
            batch_size=preset.batch_size if v["optim.batch_size"] == "auto" else int(v["optim.batch_size"]),
            decay_biases=_bool("optim.decay_biases", v["optim.decay_biases"]),
        )
        split = SplitPlan(
            strategy=v["split.strategy"],
            k=int(v["split.k"]),
            index=int(v["split.index"]),
            seed=int(v["split.seed"]),
            train_fraction=float(v["split.train_fraction"]),
            use_val=_bool("split.use_val", v["split.use_val"]),
        )
        mean_auto = v["preprocess.mean"] == "auto"
        mean = (0.0, 0.0, 0.0) if mean_auto else tuple(float(x) for x in v["preprocess.mean"].split(","))
        if len(mean) != 3:
            raise ConfigError("preprocess.mean needs three comma-separated values")
        pre = PreprocessSpec(
            resize_to=_size("preprocess.resize", v["preprocess.resize"]),
            crop=_size("preprocess.crop", v["preprocess.crop"]),
            crop_policy=v["preprocess.crop_policy"],
            mean=mean,
            horizontal_flip=_bool("preprocess.flip", v["preprocess.flip"]),
        )
        if v["finetune.reset_head"] not in ("auto", "true", "false"):
            raise ConfigError("finetune.reset_head must be auto, true or false")
        cfg = RunConfig(
            raw=v,
            model=model,
            optim=optim,
            data=v["data.source"],
            split=split,
            preprocess=pre,
            epochs=int(v["run.epochs"]),
            seed=seed,
            eval_every=int(v["run.eval_every"]),
            timing=_bool("run.timing", v["run.timing"]),
            checkpoint_in=v["checkpoint.in"],
            mean_auto=mean_auto,
            class_count_auto=class_auto,
            lr_auto=lr_auto,
            batch_auto=v["optim.batch_size"] == "auto",
            reset_head=v["finetune.reset_head"],
            head_lr_mult=float(v["finetune.head_lr_mult"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.head_lr_mult > 0:
        raise ConfigError("finetune.head_lr_mult must be positive")
    if cfg.epochs < 0 or cfg.eval_every < 1:
        raise ConfigError("run.epochs must be >= 0 and run.eval_every >= 1")
    if not cfg.data:
        raise ConfigError("data.source is required")
    return cfg


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return build_config(parse_config_text(text), overrides)


def format_config(values: dict[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))
