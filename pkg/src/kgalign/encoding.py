"""Learnable entity embeddings, GNN forward/backward passes, losses, training.

Two encoders share one parameter story: the embedding table rows are the only
per-entity parameters.  The convolutional model (``gcn-align-lite``) has no
other parameters at all; the cross-graph attention model (``attention-lite``)
adds one learnable vector per layer.  Gradients are derived by hand and
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ._segments import scatter_add_rows, segment_max_sorted, segment_sum_sorted
from .kg import AlignmentTask
from .sampling import SampledBlockList, _sample_negatives, sample_khop

log = logging.getLogger(__name__)

MODELS = ("gcn-align-lite", "attention-lite")
LOSSES = ("triplet", "hard-sample-mining")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LEAKY_SLOPE = 0.2
NORM_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    """A non-finite loss or intermediate showed up during training."""


@dataclass
class EmbeddingTable:
    """Row-addressable entity parameters: source ids first, then target ids.

    ``attention`` carries the per-layer attention vectors of the
    attention-lite model (shape (layers, 2*dim)); None for the
    convolutional model.
    """

    matrix: np.ndarray  # (|E_s|+|E_t|, D) float64
    attention: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(
            self.matrix.copy(),
            None if self.attention is None else self.attention.copy(),
        )


@dataclass
class EncoderConfig:
    model: str = "gcn-align-lite"
    layers: int = 3
    dim: int = 128
    activation: str = "tanh"
    loss: str = "triplet"
    margin: float | None = None  # resolved per loss: 1.0 triplet, 0.1 hsm
    hsm_lambda: float = 30.0
    hsm_tau: float = 1.0
    learning_rate: float = 0.02
    epochs: int = 300
    batch_size: int = 64
    negative_count: int = 0
    fanouts: tuple[int, ...] = (15, 15, 15)
    rng_seed: int = 42
    eval_every: int = 5

    def __post_init__(self):
        self.fanouts = tuple(int(f) for f in self.fanouts)
        if self.margin is None:
            self.margin = 1.0 if self.loss == "triplet" else 0.1

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ValueError(f"unknown model '{self.model}' (choose from {MODELS})")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss '{self.loss}' (choose from {LOSSES})")
        if self.activation not in ("tanh", "none"):
            raise ValueError("activation must be 'tanh' or 'none'")
        if self.layers != len(self.fanouts):
            raise ValueError("layers must equal the number of fanouts")
        for name in ("layers", "dim", "batch_size", "hsm_lambda", "hsm_tau", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.epochs < 0 or self.negative_count < 0 or self.eval_every < 0:
            raise ValueError("epochs, negative_count and eval_every must be non-negative")


@dataclass
class TrainStats:
    """Per-epoch losses and periodic ranking metrics on the test pairs."""

    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "losses": list(self.losses),
            "evals": [dict(e) for e in self.evals],
            "epoch_seconds": list(self.epoch_seconds),
        }


def init_table(
    source_entities: int, target_entities: int, cfg: EncoderConfig
) -> EmbeddingTable:
    """Seeded normal initialization scaled by 1/sqrt(dim)."""
    rng = np.random.default_rng([cfg.rng_seed, 0])
    matrix = rng.standard_normal((source_entities + target_entities, cfg.dim))
    matrix /= np.sqrt(cfg.dim)
    attention = None
    if cfg.model == "attention-lite":
        attention = rng.standard_normal((cfg.layers, 2 * cfg.dim)) / np.sqrt(2 * cfg.dim)
    return EmbeddingTable(matrix, attention)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(pre) if activation == "tanh" else pre


def forward(
    blocks: SampledBlockList, table: EmbeddingTable, cfg: EncoderConfig
) -> tuple[np.ndarray, dict]:
    """Run the sampled blocks through the encoder.

    Returns the L2-normalized embeddings of the batch entities (rows follow
    the last block's dst order) plus the cache ``backward`` needs.
    """
    if len(blocks) != cfg.layers:
        raise ValueError(f"got {len(blocks)} blocks for a {cfg.layers}-layer model")
    if cfg.model == "attention-lite" and table.attention is None:
        raise ValueError("attention-lite needs a table with attention vectors")

    H = table.matrix[blocks[0].src_nodes]
    layer_caches = []
    for li, block in enumerate(blocks):
        n_dst = len(block.dst_nodes)
        # block edges are grouped by dst, so sorted segment reductions apply
        if cfg.model == "gcn-align-lite":
            pre = segment_sum_sorted(
                block.edge_weight[:, None] * H[block.edge_src], block.edge_dst, n_dst
            )
            cache = {"H_in": H, "block": block}
        else:
            a = table.attention[li]
            a_left, a_right = a[: table.dim], a[table.dim :]
            # dst j's previous-layer features sit at src position j (prefix property)
            z = H[block.edge_src] @ a_left + H[block.edge_dst] @ a_right
            e = np.where(z > 0, z, LEAKY_SLOPE * z)
            peak = segment_max_sorted(e, block.edge_dst, n_dst, -np.inf)
            exp_e = np.exp(e - peak[block.edge_dst])
            denom = segment_sum_sorted(exp_e, block.edge_dst, n_dst)
            alpha = exp_e / denom[block.edge_dst]
            pre = segment_sum_sorted(
                alpha[:, None] * H[block.edge_src], block.edge_dst, n_dst
            )
            cache = {"H_in": H, "block": block, "z": z, "alpha": alpha}
        out = _activate(pre, cfg.activation)
        if not np.isfinite(out).all():
            raise FloatingPointError("non-finite intermediate in forward pass")
        cache["out"] = out
        layer_caches.append(cache)
        H = out

    norms = np.maximum(np.linalg.norm(H, axis=1), NORM_FLOOR)
    normalized = H / norms[:, None]
    full_cache = {"layers": layer_caches, "norms": norms, "normalized": normalized}
    return normalized, full_cache


def backward(
    blocks: SampledBlockList,
    table: EmbeddingTable,
    cfg: EncoderConfig,
    cache: dict,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Backpropagate a gradient on the normalized outputs to the parameters.

    Returns (touched row ids = outermost src nodes, gradient rows aligned
    with them, gradient on the attention vectors or None).
    """
    normalized, norms = cache["normalized"], cache["norms"]
    G = (grad_out - normalized * np.sum(normalized * grad_out, axis=1, keepdims=True))
    G = G / norms[:, None]

    attn_grad = None
    if cfg.model == "attention-lite":
        attn_grad = np.zeros_like(table.attention)

    for li in range(len(blocks) - 1, -1, -1):
        layer = cache["layers"][li]
        block = layer["block"]
        H_in = layer["H_in"]
        if cfg.activation == "tanh":
            dpre = G * (1.0 - layer["out"] ** 2)
        else:
            dpre = G
        dH_in = np.zeros_like(H_in)
        if cfg.model == "gcn-align-lite":
            scatter_add_rows(
                dH_in, block.edge_src, block.edge_weight[:, None] * dpre[block.edge_dst]
            )
        else:
            a = table.attention[li]
            a_left, a_right = a[: table.dim], a[table.dim :]
            alpha, z = layer["alpha"], layer["z"]
            dS = dpre  # S_v = sum_u alpha_uv h_u
            dalpha = np.sum(dS[block.edge_dst] * H_in[block.edge_src], axis=1)
            srow = segment_sum_sorted(alpha * dalpha, block.edge_dst, len(block.dst_nodes))
            de = alpha * (dalpha - srow[block.edge_dst])
            dz = de * np.where(z > 0, 1.0, LEAKY_SLOPE)
            attn_grad[li, : table.dim] += dz @ H_in[block.edge_src]
            attn_grad[li, table.dim :] += dz @ H_in[block.edge_dst]
            scatter_add_rows(
                dH_in,
                block.edge_src,
                alpha[:, None] * dS[block.edge_dst] + dz[:, None] * a_left[None, :],
            )
            dH_in[: len(block.dst_nodes)] += segment_sum_sorted(
                dz[:, None] * a_right[None, :], block.edge_dst, len(block.dst_nodes)
            )
        G = dH_in

    return blocks[0].src_nodes, G, attn_grad


def triplet_loss(
    batch_emb: np.ndarray,
    positive_pairs: np.ndarray,
    negatives: np.ndarray,
    margin: float,
) -> tuple[float, np.ndarray]:
    """Margin hinge over squared distances, averaged over anchor/negative pairs.

    ``positive_pairs`` holds (anchor index, truth index) rows into
    ``batch_emb``; ``negatives`` indexes extra candidate rows.  Each anchor's
    negative set is the sampled negatives plus every other pair's truth.
    Returns the loss and its exact subgradient w.r.t. ``batch_emb``.
    """
    pairs = np.asarray(positive_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("triplet loss needs at least one positive pair")
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1)
    b = len(pairs)
    grad = np.zeros_like(batch_emb)

    anchors = batch_emb[pairs[:, 0]]
    truths = batch_emb[pairs[:, 1]]
    cand_idx = np.concatenate([pairs[:, 1], negatives])
    cands = batch_emb[cand_idx]
    n_neg = len(cand_idx) - 1  # per-anchor negatives: other truths + sampled
    if n_neg == 0:
        return 0.0, grad

    d_pos = np.sum((anchors - truths) ** 2, axis=1)
    sq_a = np.sum(anchors**2, axis=1)
    sq_c = np.sum(cands**2, axis=1)
    d_neg = sq_a[:, None] - 2.0 * (anchors @ cands.T) + sq_c[None, :]
    terms = d_pos[:, None] - d_neg + margin
    terms[np.arange(b), np.arange(b)] = 0.0  # own truth is not a negative
    active = terms > 0

    scale = 1.0 / (b * n_neg)
    loss = float(terms[active].sum() * scale)

    A = active.astype(np.float64) * scale
    row_w = A.sum(axis=1)
    col_w = A.sum(axis=0)
    np.add.at(grad, pairs[:, 0], 2.0 * (A @ cands - row_w[:, None] * truths))
    np.add.at(grad, pairs[:, 1], -2.0 * row_w[:, None] * (anchors - truths))
    np.add.at(grad, cand_idx, 2.0 * (A.T @ anchors - col_w[:, None] * cands))
    return loss, grad


def hard_sample_mining_loss(
    batch_emb: np.ndarray,
    positive_pairs: np.ndarray,
    lam: float,
    tau: float,
    margin: float,
) -> tuple[float, np.ndarray]:
    """LogSumExp over in-batch negatives, averaged over anchors of both sides.

    Per anchor with truth t: log(1 + sum over other truths t' of
    exp(lam * (sim(a, t') - sim(a, t) + margin) / tau)) with sim the dot
    product of the (already normalized) rows.  Returns loss and exact
    gradient w.r.t. ``batch_emb``.
    """
    pairs = np.asarray(positive_pairs, dtype=np.int64).reshape(-1, 2)
    b = len(pairs)
    if b < 2:
        raise ValueError("hard sample mining needs at least 2 pairs for in-batch negatives")
    grad = np.zeros_like(batch_emb)
    coef = lam / tau
    total = 0.0

    for anchor_col, cand_col in ((0, 1), (1, 0)):
        A = batch_emb[pairs[:, anchor_col]]
        C = batch_emb[pairs[:, cand_col]]
        S = A @ C.T
        z = coef * (S - np.diag(S)[:, None] + margin)
        np.fill_diagonal(z, -np.inf)
        peak = np.maximum(z.max(axis=1), 0.0)
        exp_z = np.exp(z - peak[:, None])  # -inf diagonal exponentiates to 0
        denom = np.exp(-peak) + exp_z.sum(axis=1)
        total += float(np.sum(peak + np.log(denom)))
        P = exp_z / denom[:, None]
        rowsum = P.sum(axis=1)
        np.add.at(grad, pairs[:, anchor_col], coef * (P @ C - rowsum[:, None] * C))
        np.add.at(
            grad, pairs[:, cand_col], coef * (P.T @ A - rowsum[:, None] * A)
        )

    scale = 1.0 / (2 * b)
    grad *= scale
    return total * scale, grad


class AdamState:
    """Per-row Adam moments; rows advance independently when touched."""

    def __init__(self, rows: int, dim: int):
        self.m = np.zeros((rows, dim))
        self.v = np.zeros((rows, dim))
        self.steps = np.zeros(rows, dtype=np.int64)


def apply_update(
    matrix: np.ndarray,
    row_ids: np.ndarray,
    row_grads: np.ndarray,
    state: AdamState,
    learning_rate: float,
) -> None:
    """Sparse Adam step on exactly the given rows (duplicates are summed)."""
    if not np.isfinite(row_grads).all():
        raise FloatingPointError("non-finite gradient")
    ids, inv = np.unique(np.asarray(row_ids, dtype=np.int64), return_inverse=True)
    grads = np.zeros((len(ids), matrix.shape[1]))
    np.add.at(grads, inv, row_grads)

    state.steps[ids] += 1
    t = state.steps[ids].astype(np.float64)[:, None]
    state.m[ids] = ADAM_BETA1 * state.m[ids] + (1 - ADAM_BETA1) * grads
    state.v[ids] = ADAM_BETA2 * state.v[ids] + (1 - ADAM_BETA2) * grads**2
    m_hat = state.m[ids] / (1 - ADAM_BETA1**t)
    v_hat = state.v[ids] / (1 - ADAM_BETA2**t)
    matrix[ids] -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def encode_all(task: AlignmentTask, table: EmbeddingTable, cfg: EncoderConfig) -> EmbeddingTable:
    """Full-graph forward pass over both graphs: every entity's final embedding.

    Same computation as ``forward`` with exact (unsampled) neighborhoods,
    vectorized over the whole adjacency of each graph.
    """
    outputs = []
    offset = 0
    for kg in (task.source, task.target):
        if not kg.has_adjacency:
            raise ValueError("graph has no adjacency; call build_adjacency first")
        n = kg.num_entities
        H = table.matrix[offset : offset + n]
        dst = np.repeat(np.arange(n, dtype=np.int64), np.diff(kg.indptr))
        src = kg.neighbors
        for li in range(cfg.layers):
            if cfg.model == "gcn-align-lite":
                pre = segment_sum_sorted(kg.weights[:, None] * H[src], dst, n)
            else:
                a = table.attention[li]
                a_left, a_right = a[: table.dim], a[table.dim :]
                z = H[src] @ a_left + H[dst] @ a_right
                e = np.where(z > 0, z, LEAKY_SLOPE * z)
                peak = segment_max_sorted(e, dst, n, -np.inf)
                exp_e = np.exp(e - peak[dst])
                denom = segment_sum_sorted(exp_e, dst, n)
                alpha = exp_e / denom[dst]
                pre = segment_sum_sorted(alpha[:, None] * H[src], dst, n)
            H = _activate(pre, cfg.activation)
        norms = np.maximum(np.linalg.norm(H, axis=1), NORM_FLOOR)
        outputs.append(H / norms[:, None])
        offset += n
    return EmbeddingTable(np.concatenate(outputs, axis=0))


def _batch_loss_and_grads(
    cfg: EncoderConfig,
    out_src: np.ndarray,
    out_tgt: np.ndarray,
    n_pos: int,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Compute the configured loss over one encoded mini-batch.

    Batch embedding rows are the source-side outputs (positives then
    negatives) stacked over the target-side outputs.  Returns the loss and
    the gradient split back per side.
    """
    n_src = len(out_src)
    batch_emb = np.concatenate([out_src, out_tgt], axis=0)
    pos_src = np.arange(n_pos)
    pos_tgt = n_src + np.arange(n_pos)
    pairs = np.stack([pos_src, pos_tgt], axis=1)

    if cfg.loss == "triplet":
        neg_tgt_idx = n_src + np.arange(n_pos, len(out_tgt))
        neg_src_idx = np.arange(n_pos, n_src)
        loss_st, grad_st = triplet_loss(batch_emb, pairs, neg_tgt_idx, cfg.margin)
        loss_ts, grad_ts = triplet_loss(
            batch_emb, pairs[:, ::-1], neg_src_idx, cfg.margin
        )
        loss = 0.5 * (loss_st + loss_ts)
        grad = 0.5 * (grad_st + grad_ts)
    else:
        loss, grad = hard_sample_mining_loss(
            batch_emb, pairs, cfg.hsm_lambda, cfg.hsm_tau, cfg.margin
        )
    return loss, grad[:n_src], grad[n_src:]


def train(
    task: AlignmentTask,
    cfg: EncoderConfig,
    infer_options=None,
    on_epoch=None,
    collect_state: dict | None = None,
    final_eval: bool = True,
) -> tuple[EmbeddingTable, TrainStats]:
    """Full training loop: batch, sample, encode both sides, loss, Adam.

    Evaluates on the test pairs every ``cfg.eval_every`` epochs with the raw
    (un-normalized) ranking, and once more at the end through the full
    inference pipeline.  ``on_epoch`` (if given) receives one dict per epoch
    after it completes.  ``collect_state`` (if given) receives the optimizer
    state for checkpointing.  The batch size is clamped to the train pair
    count.  Deterministic for a fixed config and seed.
    """
    from . import inference as _inf
    from .evaluation import evaluate

    cfg.validate()
    if len(task.train_pairs) == 0:
        raise ValueError("task has no train pairs")
    batch_size = min(cfg.batch_size, len(task.train_pairs))
    options = infer_options if infer_options is not None else _inf.InferenceOptions()
    n_src = task.source.num_entities
    table = init_table(n_src, task.target.num_entities, cfg)
    stats = TrainStats()
    table_state = AdamState(table.rows, cfg.dim)
    attn_state = (
        AdamState(cfg.layers, 2 * cfg.dim) if cfg.model == "attention-lite" else None
    )
    if collect_state is not None:
        collect_state["table_state"] = table_state
        collect_state["attention_state"] = attn_state
    if cfg.epochs == 0:
        return table, stats
    train_pairs = task.train_pairs

    def run_eval(epoch: int, final: bool) -> dict:
        out = encode_all(task, table, cfg)
        eval_opts = options if final else options.replaced(normalize=False)
        sim = _inf.infer_alignment(out, task, eval_opts)
        report = evaluate(sim, task.test_pairs, ks=(1, 10))
        entry = {
            "epoch": epoch,
            "hits1": report.hits[1],
            "hits10": report.hits[10],
            "mrr": report.mrr,
            "final": final,
        }
        stats.evals.append(entry)
        return entry

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        order = np.random.default_rng([cfg.rng_seed, 1, epoch]).permutation(
            len(train_pairs)
        )
        epoch_losses = []
        for bi, lo in enumerate(range(0, len(order), batch_size)):
            chunk = order[lo : lo + batch_size]
            if cfg.loss == "hard-sample-mining" and len(chunk) < 2:
                continue  # a lone remainder pair has no in-batch negatives
            rng = np.random.default_rng([cfg.rng_seed, 2, epoch, bi])
            positives = train_pairs[chunk]
            neg_src = _sample_negatives(
                rng, task.source.num_entities, cfg.negative_count, positives[:, 0]
            )
            neg_tgt = _sample_negatives(
                rng, task.target.num_entities, cfg.negative_count, positives[:, 1]
            )
            src_nodes = np.concatenate([positives[:, 0], neg_src])
            tgt_nodes = np.concatenate([positives[:, 1], neg_tgt])
            blocks_s = sample_khop(task.source, src_nodes, list(cfg.fanouts), rng)
            blocks_t = sample_khop(task.target, tgt_nodes, list(cfg.fanouts), rng)
            blocks_t = blocks_t.shifted(n_src)

            out_s, cache_s = forward(blocks_s, table, cfg)
            out_t, cache_t = forward(blocks_t, table, cfg)
            loss, grad_s, grad_t = _batch_loss_and_grads(
                cfg, out_s, out_t, len(positives)
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            epoch_losses.append(loss)

            ids_s, rows_s, attn_s = backward(blocks_s, table, cfg, cache_s, grad_s)
            ids_t, rows_t, attn_t = backward(blocks_t, table, cfg, cache_t, grad_t)
            apply_update(
                table.matrix,
                np.concatenate([ids_s, ids_t]),
                np.concatenate([rows_s, rows_t]),
                table_state,
                cfg.learning_rate,
            )
            if attn_state is not None:
                apply_update(
                    table.attention,
                    np.arange(cfg.layers),
                    attn_s + attn_t,
                    attn_state,
                    cfg.learning_rate,
                )
            time.sleep(0)  # yield so concurrent readers (progress polls) stay live

        epoch_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        stats.losses.append(epoch_loss)
        stats.epoch_seconds.append(time.perf_counter() - tic)
        entry = {"epoch": epoch, "loss": epoch_loss}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and epoch + 1 < cfg.epochs:
            entry.update(run_eval(epoch, final=False))
        if on_epoch is not None:
            on_epoch(dict(entry))

    if final_eval:
        final_entry = run_eval(cfg.epochs - 1, final=True)
        if on_epoch is not None:
            on_epoch(dict(final_entry))
        log.info(
            "training done: %d epochs, final loss %.4f, final hits@1 %.3f",
            cfg.epochs,
            stats.losses[-1],
            final_entry["hits1"],
        )
    return table, stats
