"""Rank correlation with permutation p-values, and MGM rank-group summaries."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError


@dataclass
class CorrelationReport:
    spearman_rho: float
    p_value: float
    n: int
    permutations: int
    exact: bool
    xs: list[float] = field(default_factory=list)
    ys: list[float] = field(default_factory=list)


def _rho_from_ranks(rx: np.ndarray, ry: np.ndarray) -> float:
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    return float(np.dot(dx, dy) / math.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))


def spearman(xs: Sequence[float], ys: Sequence[float], permutations: int = 10_000, seed: int = 0) -> CorrelationReport:
    """Spearman rho (Pearson on average ranks) with a two-sided permutation test.

    When ``n!`` does not exceed ``permutations`` every ordering of ``ys`` is
    enumerated and the p-value is exact; otherwise ``permutations`` seeded
    shuffles are drawn and ``p = (hits + 1) / (permutations + 1)``.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"series must be 1-D and equal length, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 3:
        raise ContractError(f"need at least 3 pairs, got {n}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ContractError("rho is undefined for a constant series")
    rx, ry = rankdata(x), rankdata(y)
    rho = _rho_from_ranks(rx, ry)
    # slack so permutations tying the observed |rho| count as extreme
    thresh = abs(rho) - 1e-12
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    if math.factorial(n) <= permutations:
        perms = np.array(list(itertools.permutations(range(n))))
        null = np.abs(dy[perms] @ dx) / denom
        hits = int(np.sum(null >= thresh))
        p, exact, count = hits / len(perms), True, len(perms)
    else:
        rng = np.random.default_rng([seed, 0x5EA4])
        null = np.empty(permutations)
        chunk = 2048
        for start in range(0, permutations, chunk):
            k = min(chunk, permutations - start)
            idx = np.argsort(rng.random((k, n)), axis=1)
            null[start : start + k] = np.abs(dy[idx] @ dx) / denom
        hits = int(np.sum(null >= thresh))
        p, exact, count = (hits + 1) / (permutations + 1), False, permutations
    return CorrelationReport(rho, min(1.0, p), n, count, exact, x.tolist(), y.tolist())


def rank_groups(n: int, groups: int) -> list[np.ndarray]:
    """Split positions 0..n-1 into ``groups`` contiguous runs whose sizes differ by at most one."""
    if groups < 2:
        raise ContractError(f"need at least 2 groups, got {groups}")
    if groups > n:
        raise ContractError(f"cannot form {groups} groups from {n} records")
    return np.array_split(np.arange(n), groups)


def rank_group_summary(records, groups: int) -> list[dict]:
    """Mean final validation accuracy per MGM rank group.

    Records are ordered from lowest to highest MGM (largest ``mgm_rank``
    first), so group 1 holds the weakest-scoring architectures.
    """
    missing = [r.genotype for r in records if r.val_acc is None]
    if missing:
        raise ContractError(f"{len(missing)} record(s) lack a validation accuracy: {', '.join(missing)}")
    unranked = [r.genotype for r in records if r.mgm_rank is None]
    if unranked:
        raise ContractError(f"{len(unranked)} record(s) lack an MGM rank: {', '.join(unranked)}")
    ordered = sorted(records, key=lambda r: -r.mgm_rank)
    table = []
    for g, idx in enumerate(rank_groups(len(ordered), groups), start=1):
        members = [ordered[i] for i in idx]
        table.append(
            {
                "group": g,
                "size": len(members),
                "best_rank": min(r.mgm_rank for r in members),
                "worst_rank": max(r.mgm_rank for r in members),
                "mean_val_acc": float(np.mean([r.val_acc for r in members])),
            }
        )
    return table
