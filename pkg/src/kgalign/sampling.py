"""Seed-anchored mini-batch construction and k-hop fan-out sampling.

Sampling produces a list of bipartite blocks, outermost hop first.  Each
block's src node list starts with its dst node list (self-loops guarantee
every dst also appears as a src), so a forward pass can slice the running
feature matrix instead of re-gathering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import AlignmentTask, KnowledgeGraph


@dataclass
class MiniBatch:
    """Positive seed pairs plus per-side negative entities for one step."""

    positive_pairs: np.ndarray  # (b, 2) int64
    negatives_source: np.ndarray  # (n,) int64
    negatives_target: np.ndarray  # (n,) int64

    @property
    def source_nodes(self) -> np.ndarray:
        return np.concatenate([self.positive_pairs[:, 0], self.negatives_source])

    @property
    def target_nodes(self) -> np.ndarray:
        return np.concatenate([self.positive_pairs[:, 1], self.negatives_target])


@dataclass
class Block:
    """One hop's bipartite sampled subgraph."""

    src_nodes: np.ndarray  # global entity ids; prefix equals dst_nodes
    dst_nodes: np.ndarray
    edge_src: np.ndarray  # positions into src_nodes
    edge_dst: np.ndarray  # positions into dst_nodes
    edge_weight: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edge_src)


@dataclass
class SampledBlockList:
    """Per-layer blocks, outermost hop first; last block's dst = batch set."""

    blocks: list[Block]

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i) -> Block:
        return self.blocks[i]

    @property
    def output_nodes(self) -> np.ndarray:
        return self.blocks[-1].dst_nodes

    def shifted(self, offset: int) -> "SampledBlockList":
        """Copy with all node ids shifted; maps graph-local ids to global rows."""
        return SampledBlockList(
            [
                Block(
                    src_nodes=b.src_nodes + offset,
                    dst_nodes=b.dst_nodes + offset,
                    edge_src=b.edge_src,
                    edge_dst=b.edge_dst,
                    edge_weight=b.edge_weight,
                )
                for b in self.blocks
            ]
        )


def _sample_negatives(
    rng: np.random.Generator, total: int, count: int, exclude: np.ndarray
) -> np.ndarray:
    if count == 0:
        return np.empty(0, dtype=np.int64)
    pool = np.setdiff1d(np.arange(total, dtype=np.int64), exclude)
    if count > len(pool):
        raise ValueError(
            f"negative_count {count} exceeds the {len(pool)} entities outside the batch"
        )
    return rng.choice(pool, size=count, replace=False)


def construct_minibatch(
    task: AlignmentTask,
    batch_size: int,
    negative_count: int,
    rng: np.random.Generator,
) -> MiniBatch:
    """Draw seed pairs without replacement plus uniform per-side negatives.

    Negatives are sampled from each graph's full entity set, rejecting ids
    already present among the batch positives on that side.
    """
    n_train = len(task.train_pairs)
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if batch_size > n_train:
        raise ValueError(f"batch_size {batch_size} exceeds {n_train} train pairs")
    picked = rng.choice(n_train, size=batch_size, replace=False)
    positives = task.train_pairs[picked]
    neg_src = _sample_negatives(
        rng, task.source.num_entities, negative_count, positives[:, 0]
    )
    neg_tgt = _sample_negatives(
        rng, task.target.num_entities, negative_count, positives[:, 1]
    )
    return MiniBatch(positives, neg_src, neg_tgt)


def sample_khop(
    kg: KnowledgeGraph,
    targets: np.ndarray,
    fanouts: list[int],
    rng: np.random.Generator,
) -> SampledBlockList:
    """Sample the layered k-hop in-neighborhood of ``targets``.

    Per hop, each frontier node keeps its self-loop and up to ``fanout``
    of its other in-neighbors, sampled without replacement.  Node lists are
    deduplicated, edge weights are copied from the adjacency, and the block
    order is outermost hop first so it can be consumed layer by layer.
    """
    if not kg.has_adjacency:
        raise ValueError("graph has no adjacency; call build_adjacency first")
    if len(fanouts) == 0:
        raise ValueError("fanouts must name at least one hop")
    if any(f < 1 for f in fanouts):
        raise ValueError("every fanout must be positive")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("targets must be non-empty")
    if targets.min() < 0 or targets.max() >= kg.num_entities:
        raise ValueError("target id out of range")

    # Deduplicate preserving first-seen order.
    _, first = np.unique(targets, return_index=True)
    frontier = targets[np.sort(first)]

    blocks: list[Block] = []
    for fanout in fanouts:  # innermost hop first; reversed at the end
        dst = frontier
        pos_of: dict[int, int] = {int(v): i for i, v in enumerate(dst)}
        src_list: list[int] = list(map(int, dst))
        e_src: list[int] = []
        e_dst: list[int] = []
        e_w: list[float] = []
        for di, v in enumerate(dst):
            nbr, w, _ = kg.neighborhood(int(v))
            self_pos = np.searchsorted(nbr, v)
            keep = np.arange(len(nbr))
            others = keep[keep != self_pos]
            if len(others) > fanout:
                others = others[rng.choice(len(others), size=fanout, replace=False)]
            chosen = np.concatenate([[self_pos], others])
            for j in chosen:
                u = int(nbr[j])
                si = pos_of.get(u)
                if si is None:
                    si = len(src_list)
                    pos_of[u] = si
                    src_list.append(u)
                e_src.append(si)
                e_dst.append(di)
                e_w.append(float(w[j]))
        blocks.append(
            Block(
                src_nodes=np.asarray(src_list, dtype=np.int64),
                dst_nodes=dst,
                edge_src=np.asarray(e_src, dtype=np.int64),
                edge_dst=np.asarray(e_dst, dtype=np.int64),
                edge_weight=np.asarray(e_w, dtype=np.float64),
            )
        )
        frontier = blocks[-1].src_nodes
    blocks.reverse()
    return SampledBlockList(blocks)


def block_memory_estimate(blocks: SampledBlockList, dim: int) -> int:
    """Bytes to hold the features and edges of a sampled block list.

    Node term: |src_nodes| * dim * 8 per block (float64 features).  Edge
    term: 24 bytes per edge (two int64 positions plus a float64 weight).
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    total = 0
    for b in blocks:
        total += len(b.src_nodes) * dim * 8
        total += b.num_edges * 24
    return total


def block_node_bound(batch_size: int, fanouts: list[int]) -> int:
    """Closed-form cap on distinct src nodes of the outermost block."""
    bound = 1
    prod = 1
    for f in fanouts:
        prod *= f
        bound += prod
    return batch_size * bound
