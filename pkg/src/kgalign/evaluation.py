"""Ranking metrics (Hits@k, MRR) over sparse candidate lists."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .inference import SparseSimilarity

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    """Hits@k and mean reciprocal rank, plus the rank behind each pair.

    ``ranks`` maps a source id to the 1-based rank of its true counterpart,
    or None when the truth is absent from the row's candidates.  ``flagged``
    lists source ids that had no usable candidate row at all.
    """

    hits: dict[int, float]
    mrr: float
    ranks: dict[int, int | None]
    flagged: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "mrr": self.mrr,
            "ranks": {str(s): r for s, r in self.ranks.items()},
            "flagged": list(self.flagged),
        }


def rank_of(sim: SparseSimilarity, source: int, truth: int) -> int | None:
    """1-based rank of ``truth`` in the source's row, or None if absent.

    Rank counts candidates with strictly greater score, plus equal-score
    candidates with a lower column id (the same total order inference uses).
    """
    cols, scores = sim.row(source)
    hit = np.flatnonzero(cols == truth)
    if len(hit) == 0:
        return None
    s = scores[hit[0]]
    ahead = int(np.sum(scores > s) + np.sum((scores == s) & (cols < truth)))
    return ahead + 1


def evaluate(
    sim: SparseSimilarity,
    pairs: np.ndarray,
    ks: tuple[int, ...] = (1, 10),
) -> EvalReport:
    """Score a sparse ranking against ground-truth pairs.

    A truth absent from its row contributes reciprocal rank 0 and misses
    every k.  Sources without a usable row count as misses and are flagged.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("pairs must be non-empty")
    ks = tuple(int(k) for k in ks)
    if any(k < 1 for k in ks):
        raise ValueError("every k must be positive")

    ranks: dict[int, int | None] = {}
    flagged: list[int] = []
    recip = np.zeros(len(pairs))
    rank_arr = np.full(len(pairs), np.inf)
    for i, (s, t) in enumerate(pairs):
        s, t = int(s), int(t)
        if s < 0 or s >= sim.row_count or sim.row_length(s) == 0:
            flagged.append(s)
            ranks[s] = None
            continue
        r = rank_of(sim, s, t)
        ranks[s] = r
        if r is not None:
            recip[i] = 1.0 / r
            rank_arr[i] = r
    if flagged:
        log.warning("evaluate: %d source entities had no candidate row", len(flagged))

    hits = {k: float(np.mean(rank_arr <= k)) for k in ks}
    return EvalReport(hits=hits, mrr=float(np.mean(recip)), ranks=ranks, flagged=flagged)
