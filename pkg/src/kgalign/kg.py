"""Knowledge-graph data model, dataset IO, and synthetic benchmark generation.

A graph is a pair of name tables plus an integer triple array.  Adjacency is
kept in CSR form (one sorted in-neighbor list per node) with symmetric-
normalized edge weights, which is exactly what the encoders aggregate over.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

# Direction markers on adjacency entries (bitmask).  For an entry u in v's
# in-neighbor list: FWD means some triple (u, r, v) exists, REV means some
# triple (v, r, u) exists.  Synthetic self-loop entries carry 0.
EDGE_SELF = 0
EDGE_FWD = 1
EDGE_REV = 2


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class KnowledgeGraph:
    """Entity/relation vocabularies, triples, and optional CSR adjacency."""

    entity_names: list[str]
    relation_names: list[str]
    triples: np.ndarray  # (M, 3) int64 rows of (head, relation, tail)
    indptr: np.ndarray | None = None  # (|E|+1,) int64
    neighbors: np.ndarray | None = None  # (nnz,) int64, sorted within each node
    weights: np.ndarray | None = None  # (nnz,) float64
    flags: np.ndarray | None = None  # (nnz,) uint8 EDGE_* bitmask

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def num_triples(self) -> int:
        return self.triples.shape[0]

    @property
    def has_adjacency(self) -> bool:
        return self.indptr is not None

    def neighborhood(self, v: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """In-neighbor ids, weights and direction flags of node v (views)."""
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return self.neighbors[lo:hi], self.weights[lo:hi], self.flags[lo:hi]

    def degree(self, v: int) -> int:
        """Number of distinct neighbors of v, self-loop included."""
        return int(self.indptr[v + 1] - self.indptr[v])

    def validate(self) -> None:
        n, r = self.num_entities, self.num_relations
        if self.num_triples:
            if self.triples[:, [0, 2]].min() < 0 or self.triples[:, [0, 2]].max() >= n:
                raise ValueError("triple endpoint out of entity range")
            if self.triples[:, 1].min() < 0 or self.triples[:, 1].max() >= r:
                raise ValueError("triple relation out of range")
        if len(set(self.entity_names)) != n:
            raise ValueError("entity names not unique")


def build_adjacency(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Populate CSR adjacency with symmetric normalization and self-loops.

    Every triple (h, r, t) contributes the undirected edge {h, t}; every node
    gets a self-loop.  Edge weight is 1/sqrt(d(u) * d(v)) where d counts a
    node's distinct neighbors including itself.  Returns the same graph.
    """
    n = kg.num_entities
    if kg.num_triples:
        h = kg.triples[:, 0]
        t = kg.triples[:, 2]
        dst = np.concatenate([t, h, np.arange(n, dtype=np.int64)])
        src = np.concatenate([h, t, np.arange(n, dtype=np.int64)])
        fb = np.concatenate(
            [
                np.full(len(h), EDGE_FWD, dtype=np.uint8),
                np.full(len(h), EDGE_REV, dtype=np.uint8),
                np.zeros(n, dtype=np.uint8),
            ]
        )
    else:
        dst = src = np.arange(n, dtype=np.int64)
        fb = np.zeros(n, dtype=np.uint8)

    # Dedupe parallel edges, OR-ing their direction bits.  Sorting by the
    # combined key gives dst-major order with neighbor ids ascending.
    key = dst * n + src
    order = np.argsort(key, kind="stable")
    key, dst, src, fb = key[order], dst[order], src[order], fb[order]
    _, start = np.unique(key, return_index=True)
    merged_flags = np.bitwise_or.reduceat(fb, start)
    dst, src = dst[start], src[start]

    counts = np.bincount(dst, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    deg = counts.astype(np.float64)  # distinct neighbors incl. self
    kg.indptr = indptr
    kg.neighbors = src
    kg.weights = 1.0 / np.sqrt(deg[dst] * deg[src])
    kg.flags = merged_flags
    return kg


@dataclass
class AlignmentTask:
    """A source/target graph pair with seed (train) and held-out test links."""

    source: KnowledgeGraph
    target: KnowledgeGraph
    train_pairs: np.ndarray  # (n, 2) int64 of (source id, target id)
    test_pairs: np.ndarray

    def __post_init__(self):
        self.train_pairs = np.asarray(self.train_pairs, dtype=np.int64).reshape(-1, 2)
        self.test_pairs = np.asarray(self.test_pairs, dtype=np.int64).reshape(-1, 2)

    def validate(self) -> None:
        self.source.validate()
        self.target.validate()
        pairs = np.concatenate([self.train_pairs, self.test_pairs])
        if len(pairs) == 0:
            return
        if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= self.source.num_entities:
            raise ValueError("pair source id out of range")
        if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= self.target.num_entities:
            raise ValueError("pair target id out of range")
        for col, side in ((0, "source"), (1, "target")):
            if len(np.unique(pairs[:, col])) != len(pairs):
                raise ValueError(f"{side} entity appears in more than one pair")
        train_keys = set(map(tuple, self.train_pairs))
        if train_keys & set(map(tuple, self.test_pairs)):
            raise ValueError("train and test pairs overlap")


@dataclass
class SynthConfig:
    """Parameters for the synthetic source/target benchmark generator."""

    entity_count: int = 200
    avg_degree: float = 5.0
    relation_count: int = 4
    seed_ratio: float = 0.3
    edge_noise: float = 0.0
    hub_count: int = 0
    rng_seed: int = 42

    def validate(self) -> None:
        if self.entity_count < 2:
            raise ValueError("entity_count must be at least 2")
        if round(self.entity_count * self.avg_degree) < 1:
            raise ValueError("avg_degree implies zero edges")
        if self.relation_count < 1:
            raise ValueError("relation_count must be positive")
        if not 0.0 < self.seed_ratio < 1.0:
            raise ValueError("seed_ratio must lie in (0, 1)")
        if not 0.0 <= self.edge_noise < 1.0:
            raise ValueError("edge_noise must lie in [0, 1)")
        if self.hub_count < 0:
            raise ValueError("hub_count must be non-negative")


def _read_lines(path: Path, fields: int) -> list[tuple[str, ...]]:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = tuple(line.split("\t"))
            if len(parts) != fields:
                raise DatasetError(
                    f"{path}:{lineno}: expected {fields} tab-separated fields, got {len(parts)}"
                )
            rows.append(parts)
    return rows


def _load_triples(path: Path) -> KnowledgeGraph:
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    triples = []
    for h, r, t in _read_lines(path, 3):
        hid = ent_ids.setdefault(h, len(ent_ids))
        rid = rel_ids.setdefault(r, len(rel_ids))
        tid = ent_ids.setdefault(t, len(ent_ids))
        triples.append((hid, rid, tid))
    return KnowledgeGraph(
        entity_names=list(ent_ids),
        relation_names=list(rel_ids),
        triples=np.asarray(triples, dtype=np.int64).reshape(-1, 3),
    )


def _resolve_links(
    path: Path, src_ids: dict[str, int], tgt_ids: dict[str, int]
) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 2 tab-separated fields")
            s, t = parts
            if s not in src_ids:
                raise DatasetError(f"{path}:{lineno}: link references unknown source entity '{s}'")
            if t not in tgt_ids:
                raise DatasetError(f"{path}:{lineno}: link references unknown target entity '{t}'")
            pairs.append((src_ids[s], tgt_ids[t]))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def load_dataset(
    directory: str | Path,
    train_ratio: float | None = None,
    split_seed: int = 0,
) -> AlignmentTask:
    """Load an alignment task from a tab-separated dataset directory.

    Expects ``rel_triples_1``, ``rel_triples_2`` (head TAB relation TAB tail)
    and ``ent_links`` (source TAB target).  The train/test split comes from
    ``train_links``/``test_links`` files when present, otherwise from
    ``train_ratio`` with a seeded shuffle of ``ent_links``.  Entity ids are
    assigned in first-seen order within the triple files; links naming an
    entity absent from the triples are rejected.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"missing dataset directory: {directory}")
    source = _load_triples(directory / "rel_triples_1")
    target = _load_triples(directory / "rel_triples_2")
    src_ids = {name: i for i, name in enumerate(source.entity_names)}
    tgt_ids = {name: i for i, name in enumerate(target.entity_names)}

    links_path = directory / "ent_links"
    if not links_path.is_file():
        raise DatasetError(f"missing dataset file: {links_path}")
    links = _resolve_links(links_path, src_ids, tgt_ids)
    for col, side in ((0, "source"), (1, "target")):
        if len(np.unique(links[:, col])) != len(links):
            raise DatasetError(f"{links_path}: duplicate {side} entity in links")

    train_path = directory / "train_links"
    test_path = directory / "test_links"
    if train_path.is_file() and test_path.is_file():
        train = _resolve_links(train_path, src_ids, tgt_ids)
        test = _resolve_links(test_path, src_ids, tgt_ids)
        link_set = set(map(tuple, links))
        for name, pairs in (("train_links", train), ("test_links", test)):
            extra = set(map(tuple, pairs)) - link_set
            if extra:
                raise DatasetError(f"{directory / name}: pair not present in ent_links")
    else:
        if train_ratio is None:
            raise DatasetError(
                f"{directory}: no train_links/test_links files and no train_ratio given"
            )
        if not 0.0 < train_ratio < 1.0:
            raise DatasetError("train_ratio must lie in (0, 1)")
        order = np.random.default_rng(split_seed).permutation(len(links))
        cut = int(round(train_ratio * len(links)))
        train = links[order[:cut]]
        test = links[order[cut:]]

    task = AlignmentTask(
        source=build_adjacency(source),
        target=build_adjacency(target),
        train_pairs=train,
        test_pairs=test,
    )
    task.validate()
    return task


def save_dataset(task: AlignmentTask, directory: str | Path) -> None:
    """Write a task back to the tab-separated directory layout.

    Produces ``rel_triples_1``, ``rel_triples_2``, ``ent_links``,
    ``train_links`` and ``test_links``.  Loading the result reproduces a
    loaded task exactly (triple order preserves first-seen id assignment).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def write_triples(path: Path, kg: KnowledgeGraph) -> None:
        with path.open("w", encoding="utf-8") as fh:
            for h, r, t in kg.triples:
                fh.write(
                    f"{kg.entity_names[h]}\t{kg.relation_names[r]}\t{kg.entity_names[t]}\n"
                )

    def write_links(path: Path, pairs: np.ndarray) -> None:
        with path.open("w", encoding="utf-8") as fh:
            for s, t in pairs:
                fh.write(
                    f"{task.source.entity_names[s]}\t{task.target.entity_names[t]}\n"
                )

    write_triples(directory / "rel_triples_1", task.source)
    write_triples(directory / "rel_triples_2", task.target)
    # train then test, in task order: stable under id renumbering on reload
    write_links(directory / "ent_links", np.concatenate([task.train_pairs, task.test_pairs]))
    write_links(directory / "train_links", task.train_pairs)
    write_links(directory / "test_links", task.test_pairs)


def generate_synthetic_pair(cfg: SynthConfig) -> AlignmentTask:
    """Build a random source graph and a noisy isomorphic target copy.

    The source is a shuffled cycle backbone (keeps every entity in at least
    one triple) plus random extra triples up to ``entity_count * avg_degree``
    total.  The target starts as an identity-mapped copy; ``edge_noise`` of
    its non-backbone triples get one endpoint rewired, and ``hub_count``
    random entities receive a burst of extra incident edges so they show up
    in many neighborhoods.  ``seed_ratio`` of the identity mapping becomes
    train pairs, the rest test pairs.
    """
    cfg.validate()
    n = cfg.entity_count
    m = int(round(n * cfg.avg_degree))
    if m < n:
        raise ValueError(
            "avg_degree below 1 would leave entities with no triple; "
            "use avg_degree >= 1"
        )
    rng = np.random.default_rng(cfg.rng_seed)

    perm = rng.permutation(n)
    backbone = np.stack(
        [perm, rng.integers(0, cfg.relation_count, size=n), np.roll(perm, -1)], axis=1
    )
    extra_count = m - n
    heads = rng.integers(0, n, size=extra_count)
    tails = rng.integers(0, n, size=extra_count)
    clash = heads == tails
    while clash.any():
        tails[clash] = rng.integers(0, n, size=int(clash.sum()))
        clash = heads == tails
    rels = rng.integers(0, cfg.relation_count, size=extra_count)
    extra = np.stack([heads, rels, tails], axis=1)
    src_triples = np.concatenate([backbone, extra]).astype(np.int64)

    tgt_triples = src_triples.copy()
    rewire_count = int(round(cfg.edge_noise * m))
    if rewire_count > extra_count:
        raise ValueError("edge_noise too high: not enough non-backbone triples to rewire")
    if rewire_count:
        idx = rng.choice(np.arange(n, m), size=rewire_count, replace=False)
        flip_head = rng.random(rewire_count) < 0.5
        new_ep = rng.integers(0, n, size=rewire_count)
        for j, tri in enumerate(idx):
            col = 0 if flip_head[j] else 2
            other = tgt_triples[tri, 2 if flip_head[j] else 0]
            while new_ep[j] == other:
                new_ep[j] = rng.integers(0, n)
            tgt_triples[tri, col] = new_ep[j]

    if cfg.hub_count:
        hub_extra = max(20, int(round(10 * cfg.avg_degree)))
        hubs = rng.choice(n, size=cfg.hub_count, replace=False)
        boosts = []
        for hub in hubs:
            partners = rng.choice(n, size=hub_extra, replace=False)
            partners = partners[partners != hub]
            boosts.append(
                np.stack(
                    [
                        partners,
                        rng.integers(0, cfg.relation_count, size=len(partners)),
                        np.full(len(partners), hub, dtype=np.int64),
                    ],
                    axis=1,
                )
            )
        tgt_triples = np.concatenate([tgt_triples] + boosts)

    source = KnowledgeGraph(
        entity_names=[f"src/e{i}" for i in range(n)],
        relation_names=[f"src/r{j}" for j in range(cfg.relation_count)],
        triples=src_triples,
    )
    target = KnowledgeGraph(
        entity_names=[f"tgt/e{i}" for i in range(n)],
        relation_names=[f"tgt/r{j}" for j in range(cfg.relation_count)],
        triples=tgt_triples,
    )

    n_train = int(round(cfg.seed_ratio * n))
    split = rng.permutation(n)
    train_ids = np.sort(split[:n_train])
    test_ids = np.sort(split[n_train:])
    task = AlignmentTask(
        source=build_adjacency(source),
        target=build_adjacency(target),
        train_pairs=np.stack([train_ids, train_ids], axis=1),
        test_pairs=np.stack([test_ids, test_ids], axis=1),
    )
    task.validate()
    return task
