"""Alignment resolution: grouping, sparse top-k similarity, normalization, fusion.

The expensive dense work happens inside entity groups; across groups only a
per-row top-k sparse matrix is kept.  Hubness is handled by CSLS on the
sparse matrix and Sinkhorn normalization on the per-group dense blocks, then
the two routes are fused into the final ranking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ._segments import segment_max_sorted
from .encoding import EmbeddingTable
from .kg import AlignmentTask

log = logging.getLogger(__name__)


class ScoreCounter:
    """Counts pairwise score evaluations done by the local-similarity stage."""

    def __init__(self):
        self.value = 0

    def add(self, n: int) -> None:
        self.value += int(n)

    def reset(self) -> None:
        self.value = 0


SCORE_EVALS = ScoreCounter()


@dataclass
class SparseSimilarity:
    """Row-indexed candidate lists in CSR form, each row sorted by score.

    Ties are ordered by lower column id everywhere, making every ranking a
    total order.
    """

    row_count: int
    col_count: int
    indptr: np.ndarray  # (row_count+1,) int64
    cols: np.ndarray  # (nnz,) int64
    scores: np.ndarray  # (nnz,) float64

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.cols[lo:hi], self.scores[lo:hi]

    def row_length(self, i: int) -> int:
        return int(self.indptr[i + 1] - self.indptr[i])

    @property
    def nnz(self) -> int:
        return len(self.cols)

    def top1(self) -> np.ndarray:
        """Best candidate per row; -1 for empty rows."""
        out = np.full(self.row_count, -1, dtype=np.int64)
        nonempty = np.flatnonzero(np.diff(self.indptr) > 0)
        out[nonempty] = self.cols[self.indptr[nonempty]]
        return out

    def copy(self) -> "SparseSimilarity":
        return SparseSimilarity(
            self.row_count,
            self.col_count,
            self.indptr.copy(),
            self.cols.copy(),
            self.scores.copy(),
        )


def _sorted_sparse(
    row_count: int,
    col_count: int,
    row_of: np.ndarray,
    cols: np.ndarray,
    scores: np.ndarray,
) -> SparseSimilarity:
    """Assemble a SparseSimilarity, sorting rows by (-score, col)."""
    order = np.lexsort((cols, -scores, row_of))
    row_of, cols, scores = row_of[order], cols[order], scores[order]
    counts = np.bincount(row_of, minlength=row_count)
    indptr = np.zeros(row_count + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return SparseSimilarity(row_count, col_count, indptr, cols, scores)


@dataclass
class Partition:
    """Disjoint entity groups covering both graphs, seeded by train pairs."""

    groups: list[tuple[np.ndarray, np.ndarray]]  # (source ids, target ids)
    source_group: np.ndarray  # (|E_s|,) group index per source entity
    target_group: np.ndarray
    source_count: int
    degenerate: bool = False

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def co_group_rate(self, pairs: np.ndarray) -> float:
        """Fraction of the given pairs whose two sides share a group."""
        if len(pairs) == 0:
            return 1.0
        same = self.source_group[pairs[:, 0]] == self.target_group[pairs[:, 1]]
        return float(np.mean(same))


@dataclass
class LocalSimBlock:
    group_index: int
    source_ids: np.ndarray
    target_ids: np.ndarray
    scores: np.ndarray  # (|src|, |tgt|) dense cosine block


@dataclass
class InferenceOptions:
    """Knobs of the alignment pipeline; ``normalize=False`` is the naive mode.

    The default of one group keeps the local route exact at desk scale;
    raise ``num_groups`` to trade local-similarity cost for co-grouping risk.
    """

    k: int = 50
    num_groups: int = 1
    normalize: bool = True
    weight: float = 0.5
    sinkhorn_iterations: int = 10
    sinkhorn_temperature: float = 0.05
    csls_neighborhood: int = 10
    rng_seed: int = 0

    def replaced(self, **kw) -> "InferenceOptions":
        return replace(self, **kw)

    def validate(self) -> None:
        if self.k < 1 or self.num_groups < 1 or self.sinkhorn_iterations < 1:
            raise ValueError("k, num_groups and sinkhorn_iterations must be positive")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight must lie in [0, 1]")
        if self.sinkhorn_temperature <= 0:
            raise ValueError("sinkhorn_temperature must be positive")
        if self.csls_neighborhood < 1:
            raise ValueError("csls_neighborhood must be positive")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=1), 1e-12)
    return x / norms[:, None]


def partition_entities(
    table: EmbeddingTable,
    task: AlignmentTask,
    num_groups: int,
    rng: np.random.Generator,
) -> Partition:
    """Group entities by k-means over the train-pair source embeddings.

    Runs 25 seeded Lloyd iterations with cosine assignment.  Both sides of a
    train pair land in the source's cluster; every other entity of either
    graph goes to its nearest centroid.  Empty clusters are dropped, so the
    effective group count can be lower than requested.
    """
    if num_groups < 1:
        raise ValueError("num_groups must be positive")
    if num_groups > len(task.train_pairs):
        raise ValueError("num_groups exceeds the number of train pairs")
    n_src = task.source.num_entities
    n_tgt = task.target.num_entities
    emb = _unit_rows(table.matrix)
    seed_src = task.train_pairs[:, 0]
    seed_tgt = task.train_pairs[:, 1]
    X = emb[seed_src]

    spread = np.max(np.abs(X - X[0])) if len(X) else 0.0
    if num_groups > 1 and spread < 1e-12:
        log.warning("all seed embeddings identical; falling back to a single group")
        return Partition(
            groups=[(np.arange(n_src), np.arange(n_tgt))],
            source_group=np.zeros(n_src, dtype=np.int64),
            target_group=np.zeros(n_tgt, dtype=np.int64),
            source_count=n_src,
            degenerate=True,
        )

    centroids = X[rng.choice(len(X), size=num_groups, replace=False)]
    assign = np.zeros(len(X), dtype=np.int64)
    for _ in range(25):
        sims = X @ centroids.T
        assign = np.argmax(sims, axis=1)
        for g in range(num_groups):
            members = np.flatnonzero(assign == g)
            if len(members) == 0:
                # deterministic reseed: the point least covered by any centroid
                loner = int(np.argmin(sims.max(axis=1)))
                centroids[g] = X[loner]
                assign[loner] = g
            else:
                centroids[g] = X[members].mean(axis=0)
        centroids = _unit_rows(centroids)

    source_group = np.full(n_src, -1, dtype=np.int64)
    target_group = np.full(n_tgt, -1, dtype=np.int64)
    source_group[seed_src] = assign
    target_group[seed_tgt] = assign
    free_src = np.flatnonzero(source_group < 0)
    free_tgt = np.flatnonzero(target_group < 0)
    if len(free_src):
        source_group[free_src] = np.argmax(emb[free_src] @ centroids.T, axis=1)
    if len(free_tgt):
        target_group[free_tgt] = np.argmax(emb[n_src + free_tgt] @ centroids.T, axis=1)

    # drop group indices with no members on either side
    used = np.unique(np.concatenate([source_group, target_group]))
    remap = {int(g): i for i, g in enumerate(used)}
    source_group = np.array([remap[int(g)] for g in source_group], dtype=np.int64)
    target_group = np.array([remap[int(g)] for g in target_group], dtype=np.int64)
    groups = [
        (np.flatnonzero(source_group == g), np.flatnonzero(target_group == g))
        for g in range(len(used))
    ]
    return Partition(groups, source_group, target_group, source_count=n_src)


def local_similarity(table: EmbeddingTable, partition: Partition) -> list[LocalSimBlock]:
    """Dense cosine blocks, one per group (rows are assumed L2-normalized)."""
    n_src = partition.source_count
    blocks = []
    for g, (src_ids, tgt_ids) in enumerate(partition.groups):
        if len(src_ids) == 0 or len(tgt_ids) == 0:
            log.warning("group %d has an empty side (%d x %d)", g, len(src_ids), len(tgt_ids))
        scores = table.matrix[src_ids] @ table.matrix[n_src + tgt_ids].T
        SCORE_EVALS.add(len(src_ids) * len(tgt_ids))
        blocks.append(LocalSimBlock(g, src_ids, tgt_ids, scores))
    return blocks


def _topk_rows(queries: np.ndarray, corpus: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-row top-k by cosine (dot of unit rows); ties to lower col."""
    n_q = len(queries)
    out_cols = np.empty((n_q, k), dtype=np.int64)
    out_scores = np.empty((n_q, k))
    # small chunks keep each argsort call short (it holds the interpreter)
    chunk = max(1, int(2**18 // max(1, len(corpus))))
    for lo in range(0, n_q, chunk):
        S = queries[lo : lo + chunk] @ corpus.T
        # stable argsort of -score keeps ascending column order within ties
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        out_cols[lo : lo + chunk] = order
        out_scores[lo : lo + chunk] = np.take_along_axis(S, order, axis=1)
    return out_cols, out_scores


def _dense_topk_sparse(queries: np.ndarray, corpus: np.ndarray, k: int) -> SparseSimilarity:
    cols, scores = _topk_rows(queries, corpus, k)
    n_q = len(queries)
    indptr = np.arange(0, (n_q + 1) * k, k, dtype=np.int64)
    return SparseSimilarity(n_q, len(corpus), indptr, cols.ravel(), scores.ravel())


def topk_global(
    table: EmbeddingTable, task: AlignmentTask, k: int
) -> tuple[SparseSimilarity, SparseSimilarity]:
    """Exact top-k candidates in both directions.

    This is the reference search; an approximate backend can stand in via
    ``infer_alignment(..., backend=...)`` and is validated against this.
    """
    n_src = task.source.num_entities
    f_src = table.matrix[:n_src]
    f_tgt = table.matrix[n_src:]
    if k < 1 or k > len(f_tgt) or k > len(f_src):
        raise ValueError("k must lie in [1, min(|E_s|, |E_t|)]")
    return _dense_topk_sparse(f_src, f_tgt, k), _dense_topk_sparse(f_tgt, f_src, k)


def csls_adjust(
    sparse: SparseSimilarity, reverse: SparseSimilarity, neighborhood: int
) -> SparseSimilarity:
    """Demote hub candidates: score' = 2*score - r_row - r_col.

    r_row is the mean of the row's top-``neighborhood`` scores in ``sparse``;
    r_col the same for the candidate's row in ``reverse``.  Candidate sets
    are unchanged; rows are re-sorted.
    """
    if neighborhood < 1:
        raise ValueError("neighborhood must be positive")

    def top_means(s: SparseSimilarity) -> np.ndarray:
        means = np.zeros(s.row_count)
        for i in range(s.row_count):
            _, sc = s.row(i)
            if len(sc) == 0:
                continue
            means[i] = float(np.mean(sc[: min(neighborhood, len(sc))]))
        return means

    r_row = top_means(sparse)
    r_col = top_means(reverse)

    row_of = np.repeat(np.arange(sparse.row_count), np.diff(sparse.indptr))
    empty = np.flatnonzero(np.diff(sparse.indptr) == 0)
    if len(empty):
        log.warning("csls: %d empty rows pass through unchanged", len(empty))
    new_scores = 2.0 * sparse.scores - r_row[row_of] - r_col[sparse.cols]
    return _sorted_sparse(
        sparse.row_count, sparse.col_count, row_of, sparse.cols.copy(), new_scores
    )


def sinkhorn_dense(matrix: np.ndarray, iterations: int, temperature: float) -> np.ndarray:
    """Dense Sinkhorn: exponentiate, then alternate row/column normalization."""
    if matrix.size == 0:
        return matrix.copy()
    vals = np.exp(matrix / temperature)
    dead = vals.sum(axis=1) == 0.0
    if dead.any():
        log.warning("sinkhorn: %d rows underflowed to zero; clamped to uniform", int(dead.sum()))
        vals[dead] = 1.0
    for _ in range(iterations):
        vals /= vals.sum(axis=1, keepdims=True)
        colsum = vals.sum(axis=0)
        vals /= np.where(colsum > 0, colsum, 1.0)[None, :]
    return vals


def sinkhorn_normalize(
    sparse: SparseSimilarity, iterations: int, temperature: float
) -> SparseSimilarity:
    """Sinkhorn over the sparse support only: column sums use stored entries."""
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    row_of = np.repeat(np.arange(sparse.row_count), np.diff(sparse.indptr))
    vals = np.exp(sparse.scores / temperature)

    rowsum = np.bincount(row_of, weights=vals, minlength=sparse.row_count)
    dead = np.flatnonzero((rowsum == 0.0) & (np.diff(sparse.indptr) > 0))
    if len(dead):
        log.warning("sinkhorn: %d rows underflowed to zero; clamped to uniform", len(dead))
        for i in dead:
            lo, hi = sparse.indptr[i], sparse.indptr[i + 1]
            vals[lo:hi] = 1.0

    for _ in range(iterations):
        rowsum = np.bincount(row_of, weights=vals, minlength=sparse.row_count)
        vals = vals / np.where(rowsum > 0, rowsum, 1.0)[row_of]
        colsum = np.bincount(sparse.cols, weights=vals, minlength=sparse.col_count)
        vals = vals / np.where(colsum > 0, colsum, 1.0)[sparse.cols]
    return _sorted_sparse(
        sparse.row_count, sparse.col_count, row_of, sparse.cols.copy(), vals
    )


def _minmax_rows(values: np.ndarray, row_of: np.ndarray, row_count: int) -> np.ndarray:
    """Scale entries to [0, 1] within each row; constant rows map to 1.

    ``row_of`` must be non-decreasing (all callers build it that way).
    """
    hi = segment_max_sorted(values, row_of, row_count, -np.inf)
    lo = -segment_max_sorted(-values, row_of, row_count, -np.inf)
    span = hi - lo
    scaled = np.ones_like(values)
    ok = span[row_of] > 0
    scaled[ok] = (values[ok] - lo[row_of[ok]]) / span[row_of[ok]]
    return scaled


def fuse(
    local: list[LocalSimBlock],
    global_csls: SparseSimilarity,
    weight: float,
) -> SparseSimilarity:
    """Combine normalized local blocks with the global sparse matrix.

    Both operands are min-max scaled to [0, 1] per row; the fused candidate
    set is the union per row and absent entries count as 0.
    """
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    n_rows, n_cols = global_csls.row_count, global_csls.col_count

    g_row = np.repeat(np.arange(n_rows), np.diff(global_csls.indptr))
    g_scaled = _minmax_rows(global_csls.scores, g_row, n_rows) * (1.0 - weight)

    l_rows, l_cols, l_vals = [], [], []
    for block in local:
        if block.scores.size == 0:
            continue
        ns, nt = block.scores.shape
        flat = block.scores.ravel()
        row_of = np.repeat(np.arange(ns), nt)
        scaled = _minmax_rows(flat, row_of, ns) * weight
        l_rows.append(np.repeat(block.source_ids, nt))
        l_cols.append(np.tile(block.target_ids, ns))
        l_vals.append(scaled)
    if l_rows:
        l_row = np.concatenate(l_rows)
        l_col = np.concatenate(l_cols)
        l_val = np.concatenate(l_vals)
    else:
        l_row = np.empty(0, dtype=np.int64)
        l_col = np.empty(0, dtype=np.int64)
        l_val = np.empty(0)

    # union by (row, col): summing the two contributions implements
    # "absent entries are 0" on both sides
    all_row = np.concatenate([g_row, l_row])
    all_col = np.concatenate([global_csls.cols, l_col])
    all_val = np.concatenate([g_scaled, l_val])
    keys = all_row * n_cols + all_col
    uniq, inv = np.unique(keys, return_inverse=True)
    fused_vals = np.bincount(inv, weights=all_val, minlength=len(uniq))
    fused_rows = (uniq // n_cols).astype(np.int64)
    fused_cols = (uniq % n_cols).astype(np.int64)
    return _sorted_sparse(n_rows, n_cols, fused_rows, fused_cols, fused_vals)


def infer_alignment(
    table: EmbeddingTable,
    task: AlignmentTask,
    options: InferenceOptions | None = None,
    backend=None,
) -> SparseSimilarity:
    """Resolve source-to-target alignments from encoded embeddings.

    ``normalize=False`` serves the raw exact top-k ranking.  Otherwise the
    full pipeline runs: partition, per-group dense similarity with Sinkhorn
    normalization, global top-k with CSLS, then fusion.  ``backend`` may
    supply an approximate top-k search with the signature
    (queries, corpus, k) -> (cols, scores); the exact search is the
    reference it is measured against.
    """
    options = options or InferenceOptions()
    options.validate()
    n_src = task.source.num_entities
    n_tgt = task.target.num_entities
    f_src = table.matrix[:n_src]
    f_tgt = table.matrix[n_src:]
    # the normalized path needs the reverse search too, so k must fit both sides
    k = min(options.k, n_tgt) if not options.normalize else min(options.k, n_src, n_tgt)

    def search(queries, corpus):
        if backend is None:
            return _topk_rows(queries, corpus, k)
        cols, scores = backend(queries, corpus, k)
        return np.asarray(cols, dtype=np.int64), np.asarray(scores, dtype=np.float64)

    def as_sparse(queries, corpus):
        cols, scores = search(queries, corpus)
        indptr = np.arange(0, (len(queries) + 1) * k, k, dtype=np.int64)
        return SparseSimilarity(len(queries), len(corpus), indptr, cols.ravel(), scores.ravel())

    if not options.normalize:
        return as_sparse(f_src, f_tgt)

    num_groups = min(options.num_groups, len(task.train_pairs))
    rng = np.random.default_rng(options.rng_seed)
    partition = partition_entities(table, task, num_groups, rng)
    blocks = local_similarity(table, partition)
    normalized_blocks = [
        LocalSimBlock(
            b.group_index,
            b.source_ids,
            b.target_ids,
            sinkhorn_dense(
                b.scores, options.sinkhorn_iterations, options.sinkhorn_temperature
            ),
        )
        for b in blocks
    ]
    s2t = as_sparse(f_src, f_tgt)
    t2s = as_sparse(f_tgt, f_src)
    adjusted = csls_adjust(s2t, t2s, min(options.csls_neighborhood, k))
    return fuse(normalized_blocks, adjusted, options.weight)
