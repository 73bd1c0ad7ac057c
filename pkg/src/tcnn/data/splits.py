"""Train/test partitioning protocols.

* ``fixed``: use the items' own split tags (``train``/``test``; ``val`` joins
  train when ``use_val`` is set).
* ``kfold``: stratified k folds from one seeded shuffle per class; fold
  ``index`` is the test set.
* ``sample_rotation``: items carry a sample id; the ``index``-th sample of
  every class trains and the remaining samples test.
* ``repeated_random``: trial ``index`` draws a fresh per-class shuffle and
  keeps ``train_fraction`` of each class for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import derive_rng
from .manifest import DatasetManifest, Item

STRATEGIES = ("fixed", "kfold", "sample_rotation", "repeated_random")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    strategy: str = "fixed"
    k: int = 10  # folds (kfold), samples (sample_rotation) or trials (repeated_random)
    index: int = 0
    seed: int = 0
    train_fraction: float = 0.5
    use_val: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SplitError(f"unknown split strategy {self.strategy!r}")
        if self.k < 1 or not 0 <= self.index < max(self.k, 1):
            raise SplitError(f"index {self.index} outside 0..{self.k - 1}")
        if not 0.0 < self.train_fraction < 1.0:
            raise SplitError("train_fraction must lie in (0, 1)")

    @property
    def fold_count(self) -> int:
        return 1 if self.strategy == "fixed" else self.k

    def fold(self, index: int) -> "SplitPlan":
        return SplitPlan(self.strategy, self.k, index, self.seed, self.train_fraction, self.use_val)


def make_splits(manifest: DatasetManifest, plan: SplitPlan) -> tuple[list[Item], list[Item]]:
    if plan.strategy == "fixed":
        train_tags = {"train", "val"} if plan.use_val else {"train"}
        train = [it for it in manifest.items if it.split in train_tags]
        test = [it for it in manifest.items if it.split == "test"]
        if not train or not test:
            raise SplitError("fixed split needs items tagged 'train' and 'test'")
        return train, test

    train, test = [], []
    for cid, items in manifest.by_class().items():
        if plan.strategy == "kfold":
            order = derive_rng(plan.seed, cid).permutation(len(items))
            folds = np.array_split(order, plan.k)
            held = set(folds[plan.index].tolist())
            train += [items[i] for i in range(len(items)) if i not in held]
            test += [items[i] for i in sorted(held)]
        elif plan.strategy == "sample_rotation":
            if any(not it.sample for it in items):
                raise SplitError(f"class {cid}: sample_rotation needs a sample id on every item")
            samples = sorted({it.sample for it in items})
            if len(samples) != plan.k:
                raise SplitError(f"class {cid}: expected {plan.k} samples, found {len(samples)}")
            keep = samples[plan.index]
            train += [it for it in items if it.sample == keep]
            test += [it for it in items if it.sample != keep]
        else:
            order = derive_rng(plan.seed, plan.index * 1_000_003 + cid).permutation(len(items))
            n_train = int(round(plan.train_fraction * len(items)))
            train += [items[i] for i in sorted(order[:n_train].tolist())]
            test += [items[i] for i in sorted(order[n_train:].tolist())]
    return train, test
