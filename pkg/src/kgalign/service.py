"""HTTP JSON API for the interactive alignment workflow.

One run at a time: POST a config, poll progress while the worker thread
trains, then explore cached results.  Both the naive and the normalized
rankings for both directions are computed once when the run finishes, so
the explorer's toggles never trigger recomputation.
"""

from __future__ import annotations

import logging
import sys
import threading
import traceback
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .checkpoint import Checkpoint
from .config import MODEL_PROFILES, RunConfig, default_profile
from .encoding import EmbeddingTable, encode_all, train
from .evaluation import rank_of
from .inference import SparseSimilarity, infer_alignment
from .kg import AlignmentTask, KnowledgeGraph

log = logging.getLogger(__name__)

API = "/api/v1"
TOP_CANDIDATES = 10
EGO_FANOUT = 10
ACTIVE_STATES = ("pending", "training", "inferring")


@dataclass
class Run:
    run_id: str
    config: RunConfig
    state: str = "pending"
    error: str | None = None
    epochs_total: int = 0
    stats_rows: list[dict] = field(default_factory=list)
    task: AlignmentTask | None = None
    output: EmbeddingTable | None = None
    results: dict[tuple[str, bool], SparseSimilarity] = field(default_factory=dict)
    truth: dict[str, dict[int, int]] = field(default_factory=dict)

    def handle(self) -> dict:
        return {
            "id": self.run_id,
            "state": self.state,
            "error": self.error,
            "progress": {
                "epochs_done": sum(1 for r in self.stats_rows if "loss" in r),
                "epochs_total": self.epochs_total,
            },
            "latest": self.stats_rows[-1] if self.stats_rows else None,
        }


class Registry:
    """All runs of this process; at most one may be active."""

    def __init__(self):
        self.lock = threading.Lock()
        self.runs: dict[str, Run] = {}
        self._counter = 0

    def new_run(self, config: RunConfig) -> Run:
        with self.lock:
            if any(r.state in ACTIVE_STATES for r in self.runs.values()):
                raise RunActiveError()
            self._counter += 1
            run = Run(run_id=f"run-{self._counter}", config=config)
            run.epochs_total = config.encoder.epochs
            self.runs[run.run_id] = run
            return run

    def get(self, run_id: str) -> Run | None:
        with self.lock:
            return self.runs.get(run_id)


class RunActiveError(RuntimeError):
    pass


def _mirror(task: AlignmentTask, output: EmbeddingTable) -> tuple[AlignmentTask, EmbeddingTable]:
    """Swap source and target so the s->t pipeline serves the t->s direction."""
    mirrored_task = AlignmentTask(
        source=task.target,
        target=task.source,
        train_pairs=task.train_pairs[:, ::-1],
        test_pairs=task.test_pairs[:, ::-1],
    )
    n_src = task.source.num_entities
    matrix = np.concatenate([output.matrix[n_src:], output.matrix[:n_src]], axis=0)
    return mirrored_task, EmbeddingTable(matrix)


def _finish_run(run: Run) -> None:
    """Compute and cache every result set the explorer can ask for."""
    task, output = run.task, run.output
    options = run.config.inference
    mirrored_task, mirrored_out = _mirror(task, output)
    run.results[("s2t", False)] = infer_alignment(
        output, task, options.replaced(normalize=False)
    )
    run.results[("s2t", True)] = infer_alignment(output, task, options.replaced(normalize=True))
    run.results[("t2s", False)] = infer_alignment(
        mirrored_out, mirrored_task, options.replaced(normalize=False)
    )
    run.results[("t2s", True)] = infer_alignment(
        mirrored_out, mirrored_task, options.replaced(normalize=True)
    )
    pairs = np.concatenate([task.train_pairs, task.test_pairs])
    run.truth["s2t"] = {int(s): int(t) for s, t in pairs}
    run.truth["t2s"] = {int(t): int(s) for s, t in pairs}


def _worker(run: Run) -> None:
    try:
        run.task = run.config.load_task()
        run.state = "training"

        def on_epoch(entry: dict) -> None:
            run.stats_rows.append(entry)

        # the final full-pipeline evaluation is inference work: run it after
        # flipping state so progress polls stay fast during training
        table, _ = train(
            run.task,
            run.config.encoder,
            infer_options=run.config.inference,
            on_epoch=on_epoch,
            final_eval=False,
        )
        run.state = "inferring"
        run.output = encode_all(run.task, table, run.config.encoder)
        _finish_run(run)
        report = evaluate(run.results[("s2t", True)], run.task.test_pairs, ks=(1, 10))
        run.stats_rows.append(
            {
                "epoch": run.config.encoder.epochs - 1,
                "hits1": report.hits[1],
                "hits10": report.hits[10],
                "mrr": report.mrr,
                "final": True,
            }
        )
        run.state = "done"
    except Exception as exc:  # surfaced through the progress endpoint
        log.error("run %s failed: %s\n%s", run.run_id, exc, traceback.format_exc())
        run.error = str(exc)
        run.state = "failed"


def _classify(rank: int | None) -> str:
    if rank == 1:
        return "correct"
    if rank is not None and rank <= TOP_CANDIDATES:
        return "in-top10"
    return "miss"


def _candidate_list(run: Run, direction: str, normalized: bool, eid: int) -> dict:
    source_kg, target_kg = (
        (run.task.source, run.task.target)
        if direction == "s2t"
        else (run.task.target, run.task.source)
    )
    sim = run.results[(direction, normalized)]
    cols, scores = sim.row(eid)
    top = [
        {"id": int(c), "name": target_kg.entity_names[int(c)], "score": float(s)}
        for c, s in zip(cols[:TOP_CANDIDATES], scores[:TOP_CANDIDATES])
    ]
    truth_id = run.truth[direction].get(eid)
    rank = None
    if truth_id is not None:
        rank = rank_of(sim, eid, truth_id)
    return {
        "source": {"id": eid, "name": source_kg.entity_names[eid]},
        "candidates": top,
        "truth": None
        if truth_id is None
        else {"id": truth_id, "name": target_kg.entity_names[truth_id]},
        "rank": rank,
        "classification": _classify(rank),
    }


def _ego_graph(kg: KnowledgeGraph, eid: int, side: str, seed: int) -> dict:
    """Deterministically sampled 2-hop neighborhood with relation names."""
    rng = np.random.default_rng([seed, eid])
    nodes = [eid]
    seen = {eid}
    frontier = [eid]
    for _ in range(2):
        nxt = []
        for v in frontier:
            nbr, _, _ = kg.neighborhood(v)
            others = np.asarray([u for u in nbr if u != v], dtype=np.int64)
            if len(others) > EGO_FANOUT:
                others = others[rng.choice(len(others), EGO_FANOUT, replace=False)]
            for u in map(int, others):
                if u not in seen:
                    seen.add(u)
                    nodes.append(u)
                    nxt.append(u)
        frontier = nxt
    node_set = set(nodes)
    edges = []
    for h, r, t in kg.triples:
        h, r, t = int(h), int(r), int(t)
        if h in node_set and t in node_set:
            edges.append(
                {"source": h, "target": t, "relation": kg.relation_names[r]}
            )
    return {
        "nodes": [{"id": v, "name": kg.entity_names[v], "side": side} for v in nodes],
        "edges": edges,
    }


def _pca_2d(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, len(points))
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, np.argsort(vals)[::-1][:2]]
    # canonical sign: largest-magnitude loading is positive
    for j in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    out = centered @ comps
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def create_app(preloaded: Checkpoint | None = None) -> FastAPI:
    # keep progress polls responsive while a worker thread trains: cap how
    # long any pure-Python stretch can hold the interpreter
    sys.setswitchinterval(0.002)
    app = FastAPI(title="kgalign service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    registry = Registry()
    app.state.registry = registry

    if preloaded is not None:
        spec = preloaded.dataset_spec or {}
        config = RunConfig.from_dict(
            {k: spec.get(k) for k in ("dataset", "synth", "train_ratio", "split_seed")}
        )
        config.encoder = preloaded.encoder
        run = registry.new_run(config)
        run.task = config.load_task()
        run.output = encode_all(run.task, preloaded.table, preloaded.encoder)
        _finish_run(run)
        run.state = "done"
        log.info("preloaded checkpoint as %s", run.run_id)

    def error(status: int, message: str, **extra) -> JSONResponse:
        return JSONResponse({"error": message, **extra}, status_code=status)

    def get_run(run_id: str) -> Run | JSONResponse:
        run = registry.get(run_id)
        if run is None:
            return error(404, f"unknown run '{run_id}'")
        return run

    @app.post(API + "/runs", status_code=201)
    async def create_run(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            return error(400, "config body must be a JSON object")
        try:
            config = RunConfig.from_dict(body)
            config.validate()
        except (TypeError, ValueError) as exc:
            return error(400, str(exc))
        try:
            run = registry.new_run(config)
        except RunActiveError:
            return error(409, "a run is already in progress")
        threading.Thread(target=_worker, args=(run,), daemon=True).start()
        return run.handle()

    @app.get(API + "/runs/{run_id}/progress")
    def progress(run_id: str):
        run = get_run(run_id)
        if isinstance(run, JSONResponse):
            return run
        with registry.lock:
            rows = list(run.stats_rows)
            handle = run.handle()
        losses = [r for r in rows if "loss" in r]
        evals = [r for r in rows if "hits1" in r]
        payload = {
            **handle,
            "loss_series": [{"epoch": r["epoch"], "loss": r["loss"]} for r in losses],
            "accuracy_series": [
                {"epoch": r["epoch"], "hits1": r["hits1"], "hits10": r["hits10"], "mrr": r["mrr"]}
                for r in evals
            ],
        }
        # a direct JSONResponse skips FastAPI's encoder pass on the hot poll path
        return JSONResponse(payload)

    @app.get(API + "/runs/{run_id}/results")
    def results(
        run_id: str,
        direction: str = "s2t",
        sort: str = "id",
        normalized: bool = True,
        offset: int = 0,
        limit: int = 50,
    ):
        run = get_run(run_id)
        if isinstance(run, JSONResponse):
            return run
        if run.state != "done":
            return error(409, f"run is {run.state}, results need state done")
        if direction not in ("s2t", "t2s"):
            return error(400, "direction must be s2t or t2s")
        if sort not in ("id", "errors-first"):
            return error(400, "sort must be id or errors-first")
        offset = max(0, offset)
        limit = max(1, min(500, limit))
        n = run.results[(direction, normalized)].row_count
        items = [_candidate_list(run, direction, normalized, eid) for eid in range(n)]
        if sort == "errors-first":
            order = {"miss": 0, "in-top10": 1, "correct": 2}
            items.sort(key=lambda c: (order[c["classification"]], c["source"]["id"]))
        page = items[offset : offset + limit]
        return {
            "total": n,
            "offset": offset,
            "limit": limit,
            "direction": direction,
            "normalized": normalized,
            "items": page,
        }

    @app.get(API + "/runs/{run_id}/entities/{eid}")
    def entity_detail(run_id: str, eid: int, direction: str = "s2t", normalized: bool = True):
        run = get_run(run_id)
        if isinstance(run, JSONResponse):
            return run
        if run.state != "done":
            return error(409, f"run is {run.state}, results need state done")
        if direction not in ("s2t", "t2s"):
            return error(400, "direction must be s2t or t2s")
        kg = run.task.source if direction == "s2t" else run.task.target
        if eid < 0 or eid >= kg.num_entities:
            return error(404, f"unknown entity {eid}")
        card = _candidate_list(run, direction, normalized, eid)
        side = "source" if direction == "s2t" else "target"
        card["ego_graph"] = _ego_graph(kg, eid, side, run.config.encoder.rng_seed)
        return card

    @app.get(API + "/runs/{run_id}/projection")
    def projection(run_id: str, set: str = "test", sample: int = 200):
        run = get_run(run_id)
        if isinstance(run, JSONResponse):
            return run
        if run.state != "done":
            return error(409, f"run is {run.state}, results need state done")
        if set not in ("train", "test"):
            return error(400, "set must be train or test")
        pairs = run.task.train_pairs if set == "train" else run.task.test_pairs
        sample = max(1, sample)
        pairs = pairs[:sample]
        n_src = run.task.source.num_entities
        src_rows = run.output.matrix[pairs[:, 0]]
        tgt_rows = run.output.matrix[n_src + pairs[:, 1]]
        coords = _pca_2d(np.concatenate([src_rows, tgt_rows], axis=0))
        points = []
        for i, (s, t) in enumerate(pairs):
            points.append(
                {
                    "entity": int(s),
                    "side": "source",
                    "pair": i,
                    "x": float(coords[i, 0]),
                    "y": float(coords[i, 1]),
                }
            )
            points.append(
                {
                    "entity": int(t),
                    "side": "target",
                    "pair": i,
                    "x": float(coords[len(pairs) + i, 0]),
                    "y": float(coords[len(pairs) + i, 1]),
                }
            )
        return {"set": set, "points": points}

    @app.get(API + "/meta/models")
    def models():
        return {
            "models": [
                {"name": name, "description": profile["description"]}
                for name, profile in sorted(MODEL_PROFILES.items())
            ]
        }

    @app.get(API + "/meta/defaults")
    def defaults(model: str = "gcn-align-lite", dataset: str | None = None):
        try:
            return default_profile(model, dataset)
        except KeyError as exc:
            return error(404, str(exc.args[0]))

    return app
