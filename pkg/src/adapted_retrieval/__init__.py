"""Adapted dense retrieval: residual key-value adapters over black-box embeddings."""

from .adapter import AdapterConfig, AdapterParams, init, lookup, transform
from .datasets import RetrievalDataset, SplitSpec, load_beir, load_pairs, split
from .estimator import AdaptedDenseRetriever
from .evaluation import MetricsTable, evaluate_system, ndcg_at_k, render_table
from .index import CorpusIndex, RankedList, hard_negative, retrieve_adr, retrieve_adr_full, retrieve_baseline
from .provider import EmbeddingCache, Embedder, ProviderSpec, StubProvider, embed_batch, stub_embed
from .trainer import TrainConfig, fit, sweep, train_epoch, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "AdaptedDenseRetriever",
    "AdapterConfig",
    "AdapterParams",
    "CorpusIndex",
    "EmbeddingCache",
    "Embedder",
    "MetricsTable",
    "ProviderSpec",
    "RankedList",
    "RetrievalDataset",
    "SplitSpec",
    "StubProvider",
    "TrainConfig",
    "embed_batch",
    "evaluate_system",
    "fit",
    "hard_negative",
    "init",
    "load_beir",
    "load_pairs",
    "lookup",
    "ndcg_at_k",
    "render_table",
    "retrieve_adr",
    "retrieve_adr_full",
    "retrieve_baseline",
    "split",
    "stub_embed",
    "sweep",
    "train_epoch",
    "transform",
    "triplet_loss",
]
