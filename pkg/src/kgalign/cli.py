"""Batch entry point: train, evaluate, and serve alignment runs.

Settings come from a model profile, then an optional JSON config file, then
command-line flags (later sources win).  Output artifacts are deterministic
for a fixed config and seed: ``checkpoint.bin``, ``stats.jsonl`` (one line
per epoch, appended as training progresses), and ``report.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import MODEL_PROFILES, RunConfig, default_profile
from .encoding import EncoderConfig, encode_all, train
from .evaluation import evaluate
from .inference import InferenceOptions, infer_alignment
from .kg import DatasetError, SynthConfig

log = logging.getLogger(__name__)


def _setup_logging() -> None:
    level = os.environ.get("SEA_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", metavar="DIR", help="dataset directory (tab-separated layout)")
    p.add_argument("--synth", action="store_true", help="use a generated synthetic task")
    p.add_argument("--entities", type=int, help="synthetic entity count")
    p.add_argument("--avg-degree", type=float, help="synthetic triples per entity")
    p.add_argument("--relations", type=int, help="synthetic relation count")
    p.add_argument("--seed-ratio", type=float, help="fraction of links used as seeds")
    p.add_argument("--edge-noise", type=float, help="fraction of target triples rewired")
    p.add_argument("--hubs", type=int, help="synthetic high-degree entity count")
    p.add_argument("--train-ratio", type=float, help="split ratio when no split files exist")


def _add_encoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=sorted(MODEL_PROFILES), help="encoder model")
    p.add_argument("--layers", type=int, help="GNN layer count")
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--activation", choices=["tanh", "none"])
    p.add_argument("--loss", choices=["triplet", "hard-sample-mining"])
    p.add_argument("--margin", type=float, help="loss margin")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--negatives", type=int, help="sampled negatives per side per batch")
    p.add_argument("--fanouts", help="comma-separated per-hop fanouts, e.g. 10,10")
    p.add_argument("--seed", type=int, help="run RNG seed")


def _add_inference_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--groups", type=int, help="entity groups for local similarity")
    p.add_argument("--topk", type=int, help="candidates kept per entity")
    p.add_argument("--no-normalize", action="store_true", help="serve the naive raw ranking")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgalign", description="Entity alignment over knowledge graph pairs"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train an encoder and write artifacts")
    p_train.add_argument("--config", metavar="FILE", help="JSON run config")
    _add_dataset_flags(p_train)
    _add_encoder_flags(p_train)
    _add_inference_flags(p_train)
    p_train.add_argument("--out", metavar="DIR", default=None, help="output directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on test pairs")
    p_eval.add_argument("--checkpoint", required=True, metavar="FILE")
    p_eval.add_argument("--config", metavar="FILE")
    _add_dataset_flags(p_eval)
    _add_inference_flags(p_eval)
    p_eval.add_argument("--ks", default="1,10", help="comma-separated hits cutoffs")
    p_eval.add_argument("--out", metavar="DIR", default=None)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--config", metavar="FILE")
    p_serve.add_argument("--checkpoint", metavar="FILE", help="preload a finished run")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--host", default="127.0.0.1")
    return parser


def _merge_run_config(args: argparse.Namespace) -> RunConfig:
    """profile < config file < flags."""
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DatasetError(f"missing config file: {path}")
        base = RunConfig.from_file(path).to_dict()

    model = args.model or base.get("encoder", {}).get("model") or "gcn-align-lite"
    profile = default_profile(model)
    enc = dict(profile["encoder"])
    enc.update({k: v for k, v in base.get("encoder", {}).items() if v is not None})
    inf = dict(profile["inference"])
    inf.update({k: v for k, v in base.get("inference", {}).items() if v is not None})

    flag_to_enc = {
        "model": "model",
        "layers": "layers",
        "dim": "dim",
        "activation": "activation",
        "loss": "loss",
        "margin": "margin",
        "lr": "learning_rate",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "negatives": "negative_count",
        "seed": "rng_seed",
    }
    for flag, key in flag_to_enc.items():
        value = getattr(args, flag, None)
        if value is not None:
            enc[key] = value
    if getattr(args, "fanouts", None):
        enc["fanouts"] = [int(x) for x in str(args.fanouts).split(",") if x]
        enc["layers"] = len(enc["fanouts"])
    if getattr(args, "loss", None) and getattr(args, "margin", None) is None:
        enc.pop("margin", None)  # let the loss pick its own default margin

    for flag, key in (("groups", "num_groups"), ("topk", "k")):
        value = getattr(args, flag, None)
        if value is not None:
            inf[key] = value
    if getattr(args, "no_normalize", False):
        inf["normalize"] = False
    if getattr(args, "seed", None) is not None:
        inf["rng_seed"] = args.seed

    synth = base.get("synth")
    dataset = args.dataset or base.get("dataset")
    if args.synth or (synth is not None and not args.dataset):
        synth = dict(synth or {})
        for flag, key in (
            ("entities", "entity_count"),
            ("avg_degree", "avg_degree"),
            ("relations", "relation_count"),
            ("seed_ratio", "seed_ratio"),
            ("edge_noise", "edge_noise"),
            ("hubs", "hub_count"),
            ("seed", "rng_seed"),
        ):
            value = getattr(args, flag, None)
            if value is not None:
                synth[key] = value
        dataset = None
    else:
        synth = None

    cfg = RunConfig(
        dataset=dataset,
        synth=None if synth is None else SynthConfig(**synth),
        train_ratio=getattr(args, "train_ratio", None) or base.get("train_ratio"),
        split_seed=base.get("split_seed", 0),
        encoder=EncoderConfig(**enc),
        inference=InferenceOptions(**inf),
        out_dir=getattr(args, "out", None) or base.get("out_dir") or "runs/latest",
    )
    cfg.validate()
    return cfg


def _stats_line(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True, separators=(",", ":"))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _merge_run_config(args)
    task = cfg.load_task()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats_path = out_dir / "stats.jsonl"

    state: dict = {}
    with stats_path.open("w", encoding="utf-8") as fh:

        def on_epoch(entry: dict) -> None:
            fh.write(_stats_line(entry) + "\n")
            fh.flush()

        table, stats = train(
            task, cfg.encoder, infer_options=cfg.inference, on_epoch=on_epoch,
            collect_state=state,
        )

    save_checkpoint(
        out_dir / "checkpoint.bin",
        Checkpoint(
            table=table,
            encoder=cfg.encoder,
            source_entities=task.source.num_entities,
            target_entities=task.target.num_entities,
            table_state=state.get("table_state"),
            attention_state=state.get("attention_state"),
            dataset_spec=cfg.dataset_spec(),
        ),
    )
    if stats.evals:
        final = stats.evals[-1]
        print(f"final hits@1={final['hits1']:.4f} hits@10={final['hits10']:.4f} mrr={final['mrr']:.4f}")
    print(f"artifacts written to {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    spec = ckpt.dataset_spec or {}
    if args.dataset or args.synth or args.config:
        cfg = _merge_run_config(args)
        task = cfg.load_task()
        options = cfg.inference
    else:
        run = RunConfig.from_dict(
            {k: spec.get(k) for k in ("dataset", "synth", "train_ratio", "split_seed")}
        )
        task = run.load_task()
        options = InferenceOptions()
        if args.groups is not None:
            options = options.replaced(num_groups=args.groups)
        if args.topk is not None:
            options = options.replaced(k=args.topk)
        if args.no_normalize:
            options = options.replaced(normalize=False)

    out = encode_all(task, ckpt.table, ckpt.encoder)
    sim = infer_alignment(out, task, options)
    ks = tuple(int(x) for x in str(args.ks).split(",") if x)
    report = evaluate(sim, task.test_pairs, ks=ks)

    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    tmp = out_dir / "report.json.tmp"
    tmp.write_text(payload + "\n", encoding="utf-8")
    os.replace(tmp, out_dir / "report.json")

    header = " | ".join([f"H@{k}" for k in ks] + ["MRR"])
    values = " | ".join([f"{report.hits[k]:.4f}" for k in ks] + [f"{report.mrr:.4f}"])
    print(header)
    print(values)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    preload = None
    if args.checkpoint:
        preload = load_checkpoint(args.checkpoint)
    app = create_app(preloaded=preload)
    log.info("serving on %s:%d", args.host, args.port)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except SystemExit as exc:  # uvicorn signals bind failures this way
        return int(exc.code or 1)
    return 0


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "serve":
            return cmd_serve(args)
    except (DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
