"""Stratified, leakage-free train/val/test splitting."""

from __future__ import annotations

import logging
from collections import defaultdict
from math import floor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fruitform.data.records import DatasetManifest, DeformityClass, Split
from fruitform.errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.8, 0.1, 0.1)
SPLIT_ORDER = (Split.Train, Split.Val, Split.Test)


def largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    """Integer apportionment of ``n`` by ``ratios``; ties go to the earlier slot."""
    quotas = [n * r for r in ratios]
    # tolerate float noise like 10 * 0.7 = 6.999999999999999
    base = [floor(q + 1e-9) for q in quotas]
    rem = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base


def _check_ratios(ratios: Sequence[float]) -> Tuple[float, ...]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValidationError(f"expected 3 ratios (train, val, test), got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise ValidationError(f"ratios must be non-negative: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)!r}")
    return ratios


def _pick_sizes(available: Dict[int, int], target: int) -> Optional[Dict[int, int]]:
    """Bounded knapsack: counts per family size summing exactly to ``target``."""
    sizes = sorted(available)
    # reach[s] = counts tuple achieving sum s using the sizes processed so far
    reach: Dict[int, Tuple[int, ...]] = {0: ()}
    for size in sizes:
        nxt: Dict[int, Tuple[int, ...]] = {}
        for total, counts in reach.items():
            for k in range(available[size] + 1):
                s = total + k * size
                if s > target:
                    break
                if s not in nxt:
                    nxt[s] = counts + (k,)
        reach = nxt
    if target not in reach:
        return None
    return dict(zip(sizes, reach[target]))


def stratified_split(manifest: DatasetManifest, ratios: Sequence[float] = DEFAULT_RATIOS,
                     seed: int = 0) -> DatasetManifest:
    """Assign every record to Train/Val/Test, per class, by largest remainder.

    A source record and its Augmented children form one family and always
    share a split. Families are shuffled per class with ``seed``; Test is
    filled first, then Val, with an exact-sum choice of family sizes, and
    the rest goes to Train.
    """
    ratios = _check_ratios(ratios)
    manifest.validate()
    families: Dict[str, List[str]] = defaultdict(list)
    family_class: Dict[str, DeformityClass] = {}
    for r in manifest.records:
        root = r.parent_id or r.id
        families[root].append(r.id)
        family_class.setdefault(root, r.label)
    for r in manifest.records:
        if r.parent_id and family_class[r.parent_id] is not r.label:
            raise ValidationError(f"record {r.id!r} has a different label than its parent")

    by_class: Dict[DeformityClass, List[str]] = {c: [] for c in DeformityClass}
    for root in families:
        by_class[family_class[root]].append(root)
    empty = [c.name for c, roots in by_class.items() if not roots]
    if empty:
        raise ValidationError(f"cannot split: empty classes {empty}")

    splits: Dict[str, Split] = {}
    for cls in DeformityClass:
        roots = by_class[cls]
        rng = np.random.default_rng([seed, int(cls)])
        roots = [roots[i] for i in rng.permutation(len(roots))]
        n = sum(len(families[r]) for r in roots)
        targets = dict(zip(SPLIT_ORDER, largest_remainder(n, ratios)))
        pool = roots
        for split in (Split.Test, Split.Val):
            chosen, pool = _take_exact(pool, families, targets[split], cls, split)
            for root in chosen:
                for rid in families[root]:
                    splits[rid] = split
        for root in pool:
            for rid in families[root]:
                splits[rid] = Split.Train
    return manifest.with_records(manifest.records, splits=splits)


def _take_exact(pool: List[str], families: Dict[str, List[str]], target: int,
                cls: DeformityClass, split: Split) -> Tuple[List[str], List[str]]:
    available: Dict[int, int] = defaultdict(int)
    for root in pool:
        available[len(families[root])] += 1
    counts = _pick_sizes(dict(available), target)
    if counts is None:
        # fall back to the largest reachable total below target
        for t in range(target - 1, -1, -1):
            counts = _pick_sizes(dict(available), t)
            if counts is not None:
                log.warning("%s/%s: family sizes cannot reach %d records exactly; using %d",
                            cls.name, split.value, target, t)
                break
    chosen, rest = [], []
    need = dict(counts)
    for root in pool:
        size = len(families[root])
        if need.get(size, 0) > 0:
            chosen.append(root)
            need[size] -= 1
        else:
            rest.append(root)
    return chosen, rest
