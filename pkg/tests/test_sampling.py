import numpy as np
import pytest

from kgalign.kg import SynthConfig, build_adjacency, generate_synthetic_pair
from kgalign.sampling import (
    block_memory_estimate,
    block_node_bound,
    construct_minibatch,
    sample_khop,
)
from .test_kg import graph_from_triples


def khop_bfs(kg, targets, hops):
    """Brute-force k-hop reachable set over the adjacency (self-loops included)."""
    frontier = set(int(t) for t in targets)
    seen = set(frontier)
    for _ in range(hops):
        nxt = set()
        for v in frontier:
            nbr, _, _ = kg.neighborhood(v)
            nxt.update(int(u) for u in nbr)
        seen |= nxt
        frontier = nxt
    return seen


def path_graph(n):
    return build_adjacency(graph_from_triples(n, [(i, 0, i + 1) for i in range(n - 1)]))


class TestConstructMinibatch:
    def make_task(self, n=20, seed=0):
        return generate_synthetic_pair(
            SynthConfig(entity_count=n, avg_degree=2, seed_ratio=0.5, rng_seed=seed)
        )

    def test_exhaustive_draw(self):
        task = self.make_task()
        mb = construct_minibatch(task, len(task.train_pairs), 0, np.random.default_rng(0))
        assert sorted(map(tuple, mb.positive_pairs)) == sorted(map(tuple, task.train_pairs))
        assert len(mb.negatives_source) == 0

    def test_determinism(self):
        task = self.make_task()
        a = construct_minibatch(task, 4, 3, np.random.default_rng(11))
        b = construct_minibatch(task, 4, 3, np.random.default_rng(11))
        assert np.array_equal(a.positive_pairs, b.positive_pairs)
        assert np.array_equal(a.negatives_source, b.negatives_source)
        assert np.array_equal(a.negatives_target, b.negatives_target)

    def test_negatives_disjoint_and_unique(self):
        task = self.make_task(n=30)
        mb = construct_minibatch(task, 5, 10, np.random.default_rng(3))
        assert not set(mb.negatives_source) & set(mb.positive_pairs[:, 0])
        assert not set(mb.negatives_target) & set(mb.positive_pairs[:, 1])
        assert len(set(mb.negatives_source)) == 10
        assert len(set(mb.negatives_target)) == 10

    def test_uniform_frequency(self):
        # 10k draws of batch 1 over 10 pairs: 3 sigma around p=0.1
        task = generate_synthetic_pair(
            SynthConfig(entity_count=20, avg_degree=2, seed_ratio=0.5, rng_seed=1)
        )
        assert len(task.train_pairs) == 10
        rng = np.random.default_rng(99)
        counts = np.zeros(20)
        for _ in range(10_000):
            mb = construct_minibatch(task, 1, 0, rng)
            counts[mb.positive_pairs[0, 0]] += 1
        freqs = counts[task.train_pairs[:, 0]] / 10_000
        sigma = np.sqrt(0.1 * 0.9 / 10_000)
        assert np.all(np.abs(freqs - 0.1) <= 3 * sigma + 1e-12)

    def test_errors(self):
        task = self.make_task()
        with pytest.raises(ValueError, match="exceeds"):
            construct_minibatch(task, len(task.train_pairs) + 1, 0, np.random.default_rng(0))
        with pytest.raises(ValueError, match="negative_count"):
            construct_minibatch(task, 10, 1000, np.random.default_rng(0))


class TestSampleKhop:
    def test_full_fanout_equals_neighborhood(self):
        kg = path_graph(6)
        blocks = sample_khop(kg, np.array([2, 3]), [10], np.random.default_rng(0))
        assert len(blocks) == 1
        b = blocks[0]
        edges = set()
        for s, d in zip(b.edge_src, b.edge_dst):
            edges.add((int(b.src_nodes[s]), int(b.dst_nodes[d])))
        expect = set()
        for v in (2, 3):
            nbr, _, _ = kg.neighborhood(v)
            expect |= {(int(u), v) for u in nbr}
        assert edges == expect

    def test_fanout_cap(self):
        # center of a 5-star has degree 6 incl self; fanout 3 -> 3 + self
        kg = build_adjacency(graph_from_triples(6, [(0, 0, i) for i in range(1, 6)]))
        blocks = sample_khop(kg, np.array([0]), [3], np.random.default_rng(5))
        b = blocks[0]
        assert b.num_edges == 4
        self_edges = sum(
            1 for s, d in zip(b.edge_src, b.edge_dst)
            if b.src_nodes[s] == b.dst_nodes[d]
        )
        assert self_edges == 1

    def test_path_graph_reach(self):
        # a-b-c-d-e with fanouts [1,1]: src of outer block within 2 hops of a
        kg = path_graph(5)
        for seed in range(10):
            blocks = sample_khop(kg, np.array([0]), [1, 1], np.random.default_rng(seed))
            outer = set(int(v) for v in blocks[0].src_nodes)
            assert outer <= {0, 1, 2}
            assert not outer & {3, 4}

    def test_unlimited_fanout_matches_bfs(self):
        task = generate_synthetic_pair(SynthConfig(entity_count=120, avg_degree=3, rng_seed=7))
        kg = task.source
        targets = np.array([0, 5, 17])
        blocks = sample_khop(kg, targets, [200, 200], np.random.default_rng(0))
        assert set(map(int, blocks[0].src_nodes)) == khop_bfs(kg, targets, 2)
        assert set(map(int, blocks[1].src_nodes)) == khop_bfs(kg, targets, 1)

    def test_block_chaining_invariants(self):
        task = generate_synthetic_pair(SynthConfig(entity_count=60, avg_degree=3, rng_seed=3))
        targets = np.array([4, 9, 14, 9])  # duplicate collapses
        blocks = sample_khop(task.source, targets, [2, 3], np.random.default_rng(1))
        assert blocks[-1].dst_nodes.tolist() == [4, 9, 14]
        for b in blocks:
            assert b.src_nodes[: len(b.dst_nodes)].tolist() == b.dst_nodes.tolist()
            assert len(set(b.src_nodes.tolist())) == len(b.src_nodes)
        assert blocks[1].src_nodes.tolist() == blocks[0].dst_nodes.tolist()
        # every dst has its self-loop
        for b in blocks:
            for d, v in enumerate(b.dst_nodes):
                in_edges = [
                    int(b.src_nodes[s])
                    for s, dd in zip(b.edge_src, b.edge_dst)
                    if dd == d
                ]
                assert int(v) in in_edges

    def test_fanout_bounds(self):
        task = generate_synthetic_pair(SynthConfig(entity_count=300, avg_degree=6, rng_seed=2))
        targets = np.arange(16)
        fanouts = [3, 2]
        blocks = sample_khop(task.source, targets, fanouts, np.random.default_rng(8))
        assert len(blocks[0].src_nodes) <= block_node_bound(16, fanouts)
        for b, fanout in zip(blocks, reversed(fanouts)):
            per_dst = np.bincount(b.edge_dst, minlength=len(b.dst_nodes))
            assert per_dst.max() <= fanout + 1

    def test_weights_copied_from_adjacency(self):
        kg = path_graph(4)
        blocks = sample_khop(kg, np.array([1]), [10], np.random.default_rng(0))
        b = blocks[0]
        for s, d, w in zip(b.edge_src, b.edge_dst, b.edge_weight):
            u, v = int(b.src_nodes[s]), int(b.dst_nodes[d])
            nbr, ws, _ = kg.neighborhood(v)
            assert w == pytest.approx(ws[nbr.tolist().index(u)])

    def test_determinism(self):
        task = generate_synthetic_pair(SynthConfig(entity_count=90, avg_degree=4, rng_seed=6))
        a = sample_khop(task.source, np.arange(8), [3, 3], np.random.default_rng(42))
        b = sample_khop(task.source, np.arange(8), [3, 3], np.random.default_rng(42))
        for ba, bb in zip(a, b):
            assert np.array_equal(ba.src_nodes, bb.src_nodes)
            assert np.array_equal(ba.edge_src, bb.edge_src)
            assert np.array_equal(ba.edge_weight, bb.edge_weight)

    def test_errors(self):
        kg = path_graph(3)
        with pytest.raises(ValueError, match="at least one hop"):
            sample_khop(kg, np.array([0]), [], np.random.default_rng(0))
        with pytest.raises(ValueError, match="positive"):
            sample_khop(kg, np.array([0]), [0], np.random.default_rng(0))
        with pytest.raises(ValueError, match="non-empty"):
            sample_khop(kg, np.array([], dtype=np.int64), [1], np.random.default_rng(0))


class TestMemoryEstimate:
    def test_single_block_cost(self):
        kg = path_graph(4)
        blocks = sample_khop(kg, np.array([1]), [2], np.random.default_rng(0))
        b = blocks[0]
        expect = len(b.src_nodes) * 16 * 8 + b.num_edges * 24
        assert block_memory_estimate(blocks, 16) == expect

    def test_node_term_doubles_with_dim(self):
        task = generate_synthetic_pair(SynthConfig(entity_count=100, avg_degree=4, rng_seed=1))
        blocks = sample_khop(task.source, np.arange(8), [4, 4], np.random.default_rng(2))
        node_term = sum(len(b.src_nodes) * 32 * 8 for b in blocks)
        assert block_memory_estimate(blocks, 64) - block_memory_estimate(blocks, 32) == node_term

    def test_closed_form_bound(self):
        # estimate <= batch * (1 + f1 + f1*f2) node bound at dim cost
        task = generate_synthetic_pair(SynthConfig(entity_count=5000, avg_degree=5, rng_seed=4))
        targets = np.arange(64)
        fanouts = [5, 5]
        blocks = sample_khop(task.source, targets, fanouts, np.random.default_rng(3))
        node_bound = block_node_bound(64, fanouts)  # 64 * 31
        assert node_bound == 64 * 31
        assert len(blocks[0].src_nodes) <= node_bound
        inner_bound = block_node_bound(64, fanouts[:1])
        edge_bound = 64 * (fanouts[0] + 1) + inner_bound * (fanouts[1] + 1)
        est = block_memory_estimate(blocks, 32)
        assert est <= (node_bound + inner_bound) * 32 * 8 + edge_bound * 24
