"""Batch sampling: hierarchical blocks for the content task, plus the uniform
baseline.

A hierarchical batch of size B is (L+1) blocks of B/(L+1) slots. Block 0 is
uniform; block i pairs each slot with block 0's slot so they agree on the
level-i category but differ at level i+1; the last block shares the full leaf.
Infeasible slots fall down a ladder (relax the inequality, then duplicate the
anchor) and are counted in the batch report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class BatchReport:
    relaxed: int = 0    # inequality dropped, same level-i subtree used
    self_dup: int = 0   # anchor duplicated

    def merge(self, other):
        self.relaxed += other.relaxed
        self.self_dup += other.self_dup


class HierarchyIndex:
    """Per-level prefix maps over the category paths of a split."""

    def __init__(self, cat_levels: np.ndarray):
        cat_levels = np.asarray(cat_levels)
        if cat_levels.ndim != 2 or cat_levels.shape[0] == 0:
            raise DataError("need a nonempty n x L category matrix")
        self.n, self.L = cat_levels.shape
        self.paths = [tuple(row) for row in cat_levels]
        self.by_prefix = [dict() for _ in range(self.L)]
        for idx, path in enumerate(self.paths):
            for l in range(self.L):
                self.by_prefix[l].setdefault(path[:l + 1], []).append(idx)
        for l in range(self.L):
            for k in self.by_prefix[l]:
                self.by_prefix[l][k] = np.asarray(self.by_prefix[l][k], dtype=np.intp)
        self._strict_cache = {}

    def strict_candidates(self, level: int, path: tuple) -> np.ndarray:
        """Same level-(level+1) prefix, different id at the next level down.

        level is 0-based; for the finest level this is the same leaf.
        """
        if level == self.L - 1:
            return self.by_prefix[level][path[:level + 1]]
        key = (level, path[:level + 2])
        if key not in self._strict_cache:
            same = self.by_prefix[level][path[:level + 1]]
            sub = self.by_prefix[level + 1][path[:level + 2]]
            self._strict_cache[key] = np.setdiff1d(same, sub, assume_unique=False)
        return self._strict_cache[key]


def sample_hierarchical_batch(index: HierarchyIndex, B: int,
                              rng: np.random.Generator):
    """Returns (indices in block order, BatchReport)."""
    blocks = index.L + 1
    if B % blocks:
        raise ConfigError(f"batch size {B} not divisible by {blocks} blocks")
    size = B // blocks
    report = BatchReport()

    b0 = rng.choice(index.n, size=size, replace=size > index.n)
    out = [b0]
    for i in range(1, blocks):
        level = i - 1  # 0-based level whose label must match
        block = np.empty(size, dtype=np.intp)
        used = set()
        for j, anchor in enumerate(b0):
            path = index.paths[anchor]
            cands = index.strict_candidates(level, path)
            cands = cands[cands != anchor]
            if cands.size == 0:
                # rung 1: same level-i subtree, any finer label
                cands = index.by_prefix[level][path[:level + 1]]
                cands = cands[cands != anchor]
                if cands.size:
                    report.relaxed += 1
            if cands.size == 0:
                # rung 2: duplicate the anchor itself
                block[j] = anchor
                report.self_dup += 1
                used.add(anchor)
                continue
            # prefer a mate not already used in this block; rejection sampling
            # first (used is tiny relative to cands), exact scan as fallback
            pick = -1
            for _ in range(8):
                c = int(cands[rng.integers(cands.size)])
                if c not in used:
                    pick = c
                    break
            if pick < 0:
                fresh = [c for c in cands if c not in used]
                pick = int(fresh[rng.integers(len(fresh))]) if fresh else \
                    int(cands[rng.integers(cands.size)])
            block[j] = pick
            used.add(pick)
        out.append(block)
    return np.concatenate(out), report


def sample_random_batch(n_posts: int, B: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without replacement (the ablation baseline)."""
    if B > n_posts:
        raise DataError(f"batch size {B} exceeds dataset size {n_posts}")
    return rng.choice(n_posts, size=B, replace=False)
