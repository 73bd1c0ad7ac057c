"""Momentum SGD with weight decay and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

SCRATCH_LR = 0.001
FINETUNE_LR = 0.0001
WEIGHT_DECAY = 0.0005


@dataclass
class SgdConfig:
    base_lr: float = SCRATCH_LR
    momentum: float = 0.9
    weight_decay: float = WEIGHT_DECAY
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)
    batch_size: int = 32
    decay_biases: bool = True
    lr_mult: dict[str, float] = field(default_factory=dict)  # per layer name, e.g. a fresh classifier

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        steps = [s for s, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lr_schedule steps must be strictly increasing")
        if any(not m > 0 for m in self.lr_mult.values()):
            raise ValueError("lr_mult values must be positive")

    def lr_at(self, step: int) -> float:
        """Base rate times the multiplier of the last schedule entry reached."""
        mult = 1.0
        for s, m in self.lr_schedule:
            if step >= s:
                mult = m
        return self.base_lr * mult


def make_config(preset: str = "scratch", dataset_size_hint: int = 0, **overrides) -> SgdConfig:
    """Preset hyperparameters.

    Batch size is 32 for training sets under 20k images, then 64, 128 and 256
    for under 100k, under 500k and larger (ImageNet-sized) sets.
    """
    if preset == "scratch":
        lr = SCRATCH_LR
    elif preset == "finetune":
        lr = FINETUNE_LR
    else:
        raise ValueError(f"unknown preset {preset!r}; use 'scratch' or 'finetune'")
    if dataset_size_hint < 20_000:
        batch = 32
    elif dataset_size_hint < 100_000:
        batch = 64
    elif dataset_size_hint < 500_000:
        batch = 128
    else:
        batch = 256
    kw = dict(base_lr=lr, weight_decay=WEIGHT_DECAY, batch_size=batch)
    kw.update(overrides)
    return SgdConfig(**kw)


def sgd_step(params: dict, cfg: SgdConfig, step: int) -> float:
    """Update every parameter in place; returns the learning rate used.

    ``v <- momentum*v - lr*(g + decay*w)``, then ``w <- w + v``.  ``params``
    maps names to objects with ``value``, ``grad`` and ``momentum`` arrays.
    A parameter ``layer.weight`` uses ``lr * lr_mult[layer]`` when present.
    """
    base = cfg.lr_at(step)
    for name, p in params.items():
        lr = base * cfg.lr_mult.get(name.split(".", 1)[0], 1.0)
        if p.value.shape != p.grad.shape or p.value.shape != p.momentum.shape:
            raise ValueError(f"shape mismatch for {name}: {p.value.shape}, {p.grad.shape}, {p.momentum.shape}")
        decay = cfg.weight_decay if (cfg.decay_biases or not name.endswith(".bias")) else 0.0
        g = p.grad + decay * p.value if decay else p.grad
        p.momentum *= cfg.momentum
        p.momentum -= lr * g
        p.value += p.momentum
    return base

