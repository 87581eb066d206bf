"""Insertion-level stratified splits and nested label-fraction subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .phantom import TISSUE_CLASSES
from .seeding import rng_for

FRACTION_GRID = (0.10, 0.20, 0.30, 0.60, 0.80, 1.00)
SPLIT_RATIOS = (0.8, 0.1, 0.1)


class SplitError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class Fold:
    train: tuple
    val: tuple
    test: tuple

    def check_disjoint(self) -> None:
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise SplitError("train/val/test insertion sets overlap")

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple
    seed: int
    stratify_key: str = "meat_class"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stratify_key": self.stratify_key,
            "folds": [f.to_dict() for f in self.folds],
        }


def partition_sizes(n: int) -> tuple:
    """(train, val, test) insertion counts for one class of ``n`` insertions."""
    n_val = max(1, round_half_up(n * SPLIT_RATIOS[1]))
    n_test = max(1, round_half_up(n * SPLIT_RATIOS[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise SplitError(f"{n} insertions cannot fill train/val/test")
    return n_train, n_val, n_test


def make_splits(meat_class_of: dict, n_folds: int = 3, seed: int = 0) -> SplitPlan:
    """Stratified 80:10:10 insertion splits, one per fold.

    Each class's insertions are shuffled once; fold k rotates that order by
    k test-blocks, so test sets differ across folds whenever the class has
    at least ``n_folds`` test-blocks of insertions.
    """
    by_class = {}
    for ins_id, cls in sorted(meat_class_of.items()):
        by_class.setdefault(cls, []).append(ins_id)
    if not by_class:
        raise SplitError("no insertions")
    for cls, ids in by_class.items():
        if len(ids) < max(3, n_folds):
            raise SplitError(f"class {cls} has {len(ids)} insertions; need >= {max(3, n_folds)}")
    folds = []
    orders = {cls: list(rng_for(seed, "split", cls).permutation(ids)) for cls, ids in by_class.items()}
    for k in range(n_folds):
        train, val, test = [], [], []
        for cls in sorted(orders):
            ids = orders[cls]
            n = len(ids)
            n_train, n_val, n_test = partition_sizes(n)
            rot = ids[(k * n_test) % n :] + ids[: (k * n_test) % n]
            test += rot[:n_test]
            val += rot[n_test : n_test + n_val]
            train += rot[n_test + n_val :]
        fold = Fold(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))
        fold.check_disjoint()
        folds.append(fold)
    return SplitPlan(tuple(folds), int(seed))


def check_fraction(fraction: float) -> float:
    for f in FRACTION_GRID:
        if abs(fraction - f) < 1e-9:
            return f
    raise SplitError(f"label fraction {fraction} not in {FRACTION_GRID}")


def subsample_labeled(labels, keys, fraction: float, seed: int) -> np.ndarray:
    """Indices of a class-stratified subset holding round(fraction x count) per class.

    ``keys`` give every crop a stable identity, so the subset does not
    depend on crop order. For a fixed seed, subsets are nested across
    fractions and fraction 1.0 returns everything.
    """
    fraction = check_fraction(fraction)
    labels = np.asarray(labels)
    keys = np.asarray(keys)
    if np.any(labels < 0):
        raise SplitError("subsample_labeled takes labeled crops only")
    picked = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[np.argsort(keys[members], kind="mergesort")]
        take = round_half_up(fraction * members.size)
        if take == 0:
            raise SplitError(
                f"class {TISSUE_CLASSES[int(c)]} has {members.size} labeled crops; "
                f"fraction {fraction} keeps none"
            )
        order = rng_for(seed, "subsample", int(c)).permutation(members.size)
        picked.append(members[order[:take]])
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)
