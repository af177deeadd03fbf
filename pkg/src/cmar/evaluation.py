"""Turnaround accuracy, macro-F1 and Mann-Whitney U significance tests."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .ranking import Ranking

N_CLASSES = 3
REFERENCE_METHOD = "cma_r"
EXACT_AUTO_MAX = 12
# (min(n, m) + 1) * (max 2*rank-sum + 1) cells in the exact DP table
EXACT_TABLE_LIMIT = 50_000_000


class MissingGold(KeyError):
    def __init__(self, story_id: str):
        super().__init__(story_id)
        self.story_id = story_id


class EmptySample(ValueError):
    pass


def _top1(ranking: "Ranking") -> str:
    return ranking.order[0]


def turnaround_hits(rankings: Mapping[str, "Ranking"], gold: Mapping[str, str | None]) -> dict[str, int]:
    hits = {}
    for story_id, ranking in rankings.items():
        target = gold.get(story_id)
        if target is None:
            raise MissingGold(story_id)
        hits[story_id] = int(_top1(ranking) == target)
    return hits


def turnaround_accuracy(rankings: Mapping[str, "Ranking"], gold: Mapping[str, str | None]) -> float:
    """Fraction of stories whose top-ranked thread is the gold turnaround thread."""
    hits = turnaround_hits(rankings, gold)
    if not hits:
        return float("nan")
    return sum(hits.values()) / len(hits)


@dataclass(frozen=True)
class ConditionalRow:
    label: int
    n_class: int
    n_tp: int
    accuracy: dict[str, float | None]


def conditional_turnaround(
    preds: Mapping[str, int],
    rankings: Mapping[str, Mapping[str, "Ranking"]],
    gold_labels: Mapping[str, int],
    gold_threads: Mapping[str, str | None],
    classes: Sequence[int] = (0, 1),
) -> list[ConditionalRow]:
    """Turnaround accuracy per method restricted to correctly classified stories of each class.

    ``rankings`` maps method -> story id -> Ranking. An empty conditioning set
    gives ``None`` rather than 0.
    """
    rows = []
    for c in classes:
        members = [s for s, y in gold_labels.items() if int(y) == c]
        tp = [s for s in members if int(preds[s]) == c]
        acc: dict[str, float | None] = {}
        for method, per_story in rankings.items():
            if not tp:
                acc[method] = None
                continue
            acc[method] = turnaround_accuracy({s: per_story[s] for s in tp}, gold_threads)
        rows.append(ConditionalRow(c, len(members), len(tp), acc))
    return rows


def macro_f1(preds: Sequence[int], gold: Sequence[int], n_classes: int = N_CLASSES) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    preds = [int(p) for p in preds]
    gold = [int(g) for g in gold]
    if len(preds) != len(gold):
        raise ValueError("preds and gold differ in length")
    scores = []
    for c in range(n_classes):
        tp = sum(1 for p, g in zip(preds, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, gold) if p != c and g == c)
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / n_classes


# --------------------------------------------------------------------------- Mann-Whitney U


class MWMode(str, enum.Enum):
    EXACT = "exact"
    NORMAL = "normal"
    AUTO = "auto"


def u_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    """Number of pairs with a > b, counting ties as one half."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    gt = np.sum(a[:, None] > b[None, :])
    eq = np.sum(a[:, None] == b[None, :])
    return float(gt + 0.5 * eq)


def _tie_groups(pooled: np.ndarray) -> tuple[list[int], list[int]]:
    """Sizes of tie groups in ascending order and their doubled midranks."""
    values, counts = np.unique(pooled, return_counts=True)
    sizes = [int(c) for c in counts]
    doubled, start = [], 0
    for t in sizes:
        # midrank of ranks start+1 .. start+t, times two
        doubled.append(2 * start + t + 1)
        start += t
    return sizes, doubled


def _exact_p(a: np.ndarray, b: np.ndarray, u: float) -> float:
    """Two-sided permutation p-value of U, ties handled through midranks.

    Counts, over all ways to pick len(a) of the pooled values, how often the
    doubled rank sum of the picked set lands on each value.
    """
    n, m = len(a), len(b)
    sizes, doubled = _tie_groups(np.concatenate([a, b]))
    smax = sum(sorted((d for d, t in zip(doubled, sizes) for _ in range(t)), reverse=True)[:n])
    if (n + 1) * (smax + 1) > EXACT_TABLE_LIMIT:
        raise ValueError(f"exact distribution too large for n={n}, m={m}; use the normal approximation")
    table = np.zeros((n + 1, smax + 1))
    table[0, 0] = 1.0
    for t, d in zip(sizes, doubled):
        new = np.zeros_like(table)
        for j in range(0, min(t, n) + 1):
            w = math.comb(t, j)
            shift = j * d
            if shift > smax:
                break
            new[j:, shift:] += w * table[: n + 1 - j, : smax + 1 - shift]
        table = new
    dist = table[n] / math.comb(n + m, n)
    # doubled rank sum S relates to U through 2U = S - n(n+1)
    s_obs = int(round(2 * u + n * (n + 1)))
    lower = dist[: s_obs + 1].sum()
    upper = dist[s_obs:].sum()
    return float(min(1.0, 2 * min(lower, upper)))


def _normal_p(n: int, m: int, u: float, pooled: np.ndarray) -> float:
    N = n + m
    sizes, _ = _tie_groups(pooled)
    tie_term = sum(t**3 - t for t in sizes) / (N * (N - 1)) if N > 1 else 0.0
    var = n * m / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = max(abs(u - n * m / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def mann_whitney_u(a: Sequence[float], b: Sequence[float], mode: MWMode | str = MWMode.AUTO) -> tuple[float, float]:
    """U statistic of ``a`` against ``b`` and its two-sided p-value.

    ``exact`` enumerates the permutation distribution by dynamic programming
    over tie groups; ``normal`` uses the tie-corrected variance with a
    continuity correction; ``auto`` is exact when both samples have at most
    12 values.
    """
    mode = MWMode(mode)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be non-empty")
    n, m = a.size, b.size
    if mode is MWMode.EXACT and n * m > 10**6:
        raise ValueError("exact mode needs n*m <= 1e6")
    u = u_statistic(a, b)
    if mode is MWMode.AUTO:
        mode = MWMode.EXACT if max(n, m) <= EXACT_AUTO_MAX else MWMode.NORMAL
    if mode is MWMode.EXACT:
        if n > m:
            # same p-value from the smaller sample's side keeps the table small
            return u, _exact_p(b, a, n * m - u)
        return u, _exact_p(a, b, u)
    return u, _normal_p(n, m, u, np.concatenate([a, b]))


@dataclass(frozen=True)
class SignificanceRow:
    method_a: str
    method_b: str
    u: float
    p_value: float


def significance_suite(
    hits: Mapping[str, Sequence[int]],
    reference: str = REFERENCE_METHOD,
    mode: MWMode | str = MWMode.AUTO,
) -> list[SignificanceRow]:
    """Mann-Whitney U of the reference method's per-story hits against every other method."""
    if reference not in hits:
        raise KeyError(reference)
    rows = []
    for method, other in hits.items():
        if method == reference:
            continue
        u, p = mann_whitney_u(hits[reference], other, mode)
        rows.append(SignificanceRow(reference, method, u, p))
    return rows
