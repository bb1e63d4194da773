"""Scalable entity alignment over pairs of knowledge graphs."""

from .encoding import (
    EmbeddingTable,
    EncoderConfig,
    TrainStats,
    encode_all,
    forward,
    hard_sample_mining_loss,
    train,
    triplet_loss,
)
from .evaluation import EvalReport, evaluate
from .inference import (
    InferenceOptions,
    Partition,
    SparseSimilarity,
    csls_adjust,
    fuse,
    infer_alignment,
    local_similarity,
    partition_entities,
    sinkhorn_normalize,
    topk_global,
)
from .kg import (
    AlignmentTask,
    KnowledgeGraph,
    SynthConfig,
    Triple,
    build_adjacency,
    generate_synthetic_pair,
    load_dataset,
    save_dataset,
)
from .sampling import (
    MiniBatch,
    SampledBlockList,
    block_memory_estimate,
    construct_minibatch,
    sample_khop,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentTask",
    "EmbeddingTable",
    "EncoderConfig",
    "EvalReport",
    "InferenceOptions",
    "KnowledgeGraph",
    "MiniBatch",
    "Partition",
    "SampledBlockList",
    "SparseSimilarity",
    "SynthConfig",
    "TrainStats",
    "Triple",
    "block_memory_estimate",
    "build_adjacency",
    "construct_minibatch",
    "csls_adjust",
    "encode_all",
    "evaluate",
    "forward",
    "fuse",
    "generate_synthetic_pair",
    "hard_sample_mining_loss",
    "infer_alignment",
    "load_dataset",
    "local_similarity",
    "partition_entities",
    "sample_khop",
    "save_dataset",
    "sinkhorn_normalize",
    "topk_global",
    "train",
    "triplet_loss",
]
