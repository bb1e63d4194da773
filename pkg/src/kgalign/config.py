"""Run configuration: dataset source, encoder and inference settings, profiles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .encoding import EncoderConfig
from .inference import InferenceOptions
from .kg import AlignmentTask, SynthConfig, generate_synthetic_pair, load_dataset

# Suggested hyperparameters per model; dataset names refine them further.
MODEL_PROFILES: dict[str, dict] = {
    "gcn-align-lite": {
        "description": "Convolutional aggregation with symmetric normalization; "
        "parameters are the embedding rows only.",
        "encoder": {
            "model": "gcn-align-lite",
            "layers": 3,
            "dim": 128,
            "activation": "tanh",
            "loss": "triplet",
            "margin": 1.0,
            "learning_rate": 0.02,
            "epochs": 300,
            "batch_size": 64,
            "negative_count": 0,
            "fanouts": [15, 15, 15],
        },
    },
    "attention-lite": {
        "description": "Single cross-graph attention vector per layer with "
        "leaky-relu logits and per-node softmax.",
        "encoder": {
            "model": "attention-lite",
            "layers": 2,
            "dim": 64,
            "activation": "tanh",
            "loss": "hard-sample-mining",
            "margin": 0.1,
            "hsm_lambda": 30.0,
            "hsm_tau": 1.0,
            "learning_rate": 0.02,
            "epochs": 150,
            "batch_size": 64,
            "negative_count": 0,
            "fanouts": [10, 10],
        },
    },
}

DATASET_PROFILES: dict[str, dict] = {
    "synthetic-small": {
        "synth": {"entity_count": 200, "avg_degree": 5.0, "seed_ratio": 0.3, "rng_seed": 42},
        "encoder": {},
    },
    "synthetic-hub": {
        "synth": {
            "entity_count": 1000,
            "avg_degree": 5.0,
            "seed_ratio": 0.3,
            "edge_noise": 0.1,
            "hub_count": 30,
            "rng_seed": 0,
        },
        "encoder": {"layers": 2, "dim": 64, "fanouts": [10, 10], "epochs": 60},
    },
}


def default_profile(model: str, dataset: str | None = None) -> dict:
    """Pre-filled hyperparameters for a model, refined by a known dataset name."""
    if model not in MODEL_PROFILES:
        raise KeyError(f"unknown model '{model}'")
    profile = json.loads(json.dumps(MODEL_PROFILES[model]))  # deep copy
    profile["inference"] = asdict(InferenceOptions())
    if dataset is not None and dataset in DATASET_PROFILES:
        ds = DATASET_PROFILES[dataset]
        profile["encoder"].update(ds.get("encoder", {}))
        if "synth" in ds:
            profile["synth"] = dict(ds["synth"])
    return profile


@dataclass
class RunConfig:
    """Everything one run needs: data source, encoder, inference, output."""

    dataset: str | None = None
    synth: SynthConfig | None = None
    train_ratio: float | None = None
    split_seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    inference: InferenceOptions = field(default_factory=InferenceOptions)
    out_dir: str = "runs/latest"

    def validate(self) -> None:
        if (self.dataset is None) == (self.synth is None):
            raise ValueError("exactly one of dataset path or synth config must be set")
        self.encoder.validate()
        self.inference.validate()

    def load_task(self) -> AlignmentTask:
        self.validate()
        if self.synth is not None:
            return generate_synthetic_pair(self.synth)
        return load_dataset(self.dataset, train_ratio=self.train_ratio, split_seed=self.split_seed)

    def dataset_spec(self) -> dict:
        return {
            "dataset": self.dataset,
            "synth": None if self.synth is None else asdict(self.synth),
            "train_ratio": self.train_ratio,
            "split_seed": self.split_seed,
        }

    def to_dict(self) -> dict:
        return {
            **self.dataset_spec(),
            "encoder": asdict(self.encoder),
            "inference": asdict(self.inference),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {
            "dataset",
            "synth",
            "train_ratio",
            "split_seed",
            "encoder",
            "inference",
            "out_dir",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        synth = raw.get("synth")
        return cls(
            dataset=raw.get("dataset"),
            synth=None if synth is None else SynthConfig(**synth),
            train_ratio=raw.get("train_ratio"),
            split_seed=raw.get("split_seed") or 0,
            encoder=EncoderConfig(**(raw.get("encoder") or {})),
            inference=InferenceOptions(**(raw.get("inference") or {})),
            out_dir=raw.get("out_dir") or "runs/latest",
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(raw)
