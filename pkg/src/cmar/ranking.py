"""Competition ranks and sum-rank aggregation shared by every interpreter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


def competition_ranks(scores: Sequence[float]) -> list[int]:
    """Descending "1224" ranks: rank = 1 + number of strictly larger scores."""
    return [1 + sum(1 for other in scores if other > s) for s in scores]


@dataclass(frozen=True)
class RankedCandidate:
    candidate_id: str
    t1: float
    t2: float | None
    rank_t1: int
    rank_t2: int | None
    sum_rank: int
    final_rank: int


@dataclass(frozen=True)
class Ranking:
    """Candidates sorted by ascending sum_rank, ties in input order."""

    candidates: tuple[RankedCandidate, ...]

    @property
    def order(self) -> list[str]:
        return [c.candidate_id for c in self.candidates]

    @property
    def top(self) -> str:
        return self.candidates[0].candidate_id

    def __len__(self) -> int:
        return len(self.candidates)

    def get(self, candidate_id: str) -> RankedCandidate:
        for c in self.candidates:
            if c.candidate_id == candidate_id:
                return c
        raise KeyError(candidate_id)


def _finalize(ids: Sequence[str], rows: list[tuple]) -> Ranking:
    # rows: (t1, t2, rank_t1, rank_t2, sum_rank) aligned with ids
    if len(set(ids)) != len(ids):
        raise ValueError("candidate ids must be unique")
    order = sorted(range(len(ids)), key=lambda i: (rows[i][4], i))
    return Ranking(
        tuple(RankedCandidate(ids[i], *rows[i], final_rank=pos + 1) for pos, i in enumerate(order))
    )


def sum_rank(ids: Sequence[str], t1: Sequence[float], t2: Sequence[float]) -> Ranking:
    """Rank by each metric separately, then order by the sum of the two ranks."""
    r1, r2 = competition_ranks(t1), competition_ranks(t2)
    rows = [(float(t1[i]), float(t2[i]), r1[i], r2[i], r1[i] + r2[i]) for i in range(len(ids))]
    return _finalize(ids, rows)


def aggregate_rank_sums(
    ids: Sequence[str],
    t1: Sequence[float],
    t2: Sequence[float],
    rank_t1: Sequence[int],
    rank_t2: Sequence[int],
) -> Ranking:
    """Order by precomputed per-metric rank totals (e.g. summed over layers)."""
    rows = [(float(t1[i]), float(t2[i]), int(rank_t1[i]), int(rank_t2[i]), int(rank_t1[i] + rank_t2[i])) for i in range(len(ids))]
    return _finalize(ids, rows)


def score_rank(ids: Sequence[str], scores: Sequence[float]) -> Ranking:
    """Single-score ranking, larger first."""
    r = competition_ranks(scores)
    rows = [(float(scores[i]), None, r[i], None, r[i]) for i in range(len(ids))]
    return _finalize(ids, rows)
