"""Binary checkpoint IO: embedding table, config, and optimizer state.

Layout (all little-endian): 8-byte magic, u32 header length, UTF-8 JSON
header (encoder config, entity counts, flags), then float64 payloads in
row-major order: the table, attention vectors if present, and per-row Adam
state (step counts as u64, then first and second moments).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoding import AdamState, EmbeddingTable, EncoderConfig

MAGIC = b"KGALNCP1"


@dataclass
class Checkpoint:
    table: EmbeddingTable
    encoder: EncoderConfig
    source_entities: int
    target_entities: int
    table_state: AdamState | None = None
    attention_state: AdamState | None = None
    dataset_spec: dict | None = None  # how to rebuild the task this was trained on


def _write_array(fh, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(fh, count: int, dtype: str) -> np.ndarray:
    byte_len = count * np.dtype(dtype).itemsize
    buf = fh.read(byte_len)
    if len(buf) != byte_len:
        raise ValueError("checkpoint truncated")
    return np.frombuffer(buf, dtype=dtype).copy()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically: a temp file is renamed over the destination."""
    path = Path(path)
    cfg = ckpt.encoder
    header = {
        "encoder": asdict(cfg),
        "source_entities": ckpt.source_entities,
        "target_entities": ckpt.target_entities,
        "dim": ckpt.table.dim,
        "has_attention": ckpt.table.attention is not None,
        "has_optimizer": ckpt.table_state is not None,
        "dataset_spec": ckpt.dataset_spec,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        _write_array(fh, ckpt.table.matrix, "<f8")
        if ckpt.table.attention is not None:
            _write_array(fh, ckpt.table.attention, "<f8")
        if ckpt.table_state is not None:
            _write_array(fh, ckpt.table_state.steps, "<u8")
            _write_array(fh, ckpt.table_state.m, "<f8")
            _write_array(fh, ckpt.table_state.v, "<f8")
            if ckpt.table.attention is not None:
                st = ckpt.attention_state
                _write_array(fh, st.steps, "<u8")
                _write_array(fh, st.m, "<f8")
                _write_array(fh, st.v, "<f8")
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (blob_len,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(blob_len)).decode("utf-8"))
        cfg = EncoderConfig(**header["encoder"])
        n = header["source_entities"] + header["target_entities"]
        d = header["dim"]
        matrix = _read_array(fh, n * d, "<f8").reshape(n, d)
        attention = None
        if header["has_attention"]:
            attention = _read_array(fh, cfg.layers * 2 * d, "<f8").reshape(cfg.layers, 2 * d)
        table = EmbeddingTable(matrix, attention)
        table_state = attention_state = None
        if header["has_optimizer"]:
            table_state = AdamState(n, d)
            table_state.steps = _read_array(fh, n, "<u8").astype(np.int64)
            table_state.m = _read_array(fh, n * d, "<f8").reshape(n, d)
            table_state.v = _read_array(fh, n * d, "<f8").reshape(n, d)
            if header["has_attention"]:
                attention_state = AdamState(cfg.layers, 2 * d)
                attention_state.steps = _read_array(fh, cfg.layers, "<u8").astype(np.int64)
                attention_state.m = _read_array(fh, cfg.layers * 2 * d, "<f8").reshape(cfg.layers, 2 * d)
                attention_state.v = _read_array(fh, cfg.layers * 2 * d, "<f8").reshape(cfg.layers, 2 * d)
    return Checkpoint(
        table=table,
        encoder=cfg,
        source_entities=header["source_entities"],
        target_entities=header["target_entities"],
        table_state=table_state,
        attention_state=attention_state,
        dataset_spec=header.get("dataset_spec"),
    )
