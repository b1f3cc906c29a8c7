"""Synthetic query/corpus misalignment fixture for the offline stub provider.

Every target document is a bag of random tokens and its query repeats most of
them. Queries carry the stub's domain tag, so in ``offset`` mode their
embeddings are shifted along a fixed offset vector. The corpus also holds
tagged decoy documents that share that shift; baseline cosine retrieval ranks
the decoys above the true targets. A query adapter that learns to remove the
offset restores the token-overlap ranking.
"""

from __future__ import annotations

import numpy as np

from .datasets import FULL_CORPUS, RetrievalDataset
from .provider import StubProvider

DEFAULT_TAG = "[nl]"


def make_offset_fixture(n_train=64, n_test=32, d=64, seed=0, n_decoys=64, doc_tokens=12, query_tokens=8,
                        noise_tokens=2, vocab_size=5000, offset_scale=1.5, tag=DEFAULT_TAG,
                        distribution="sign"):
    """Return ``(dataset, stub)``; each query has exactly one positive document."""
    rng = np.random.default_rng([seed, 0xF1C7])
    vocab = [f"w{i}" for i in range(vocab_size)]

    def words(ids):
        return " ".join(vocab[t] for t in ids)

    corpus, queries, pairs, partition = {}, {}, [], {}
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        doc = rng.choice(vocab_size, size=doc_tokens, replace=False)
        kept = rng.choice(doc, size=query_tokens, replace=False)
        noise = rng.choice(vocab_size, size=noise_tokens, replace=False)
        cid, qid = f"{split}-c{i:04d}", f"{split}-q{i:04d}"
        corpus[cid] = words(doc)
        queries[qid] = f"{tag} {words(np.concatenate([kept, noise]))}"
        pairs.append((qid, cid, 1))
        partition[qid] = split
    for j in range(n_decoys):
        corpus[f"decoy-{j:04d}"] = f"{tag} {words(rng.choice(vocab_size, size=doc_tokens, replace=False))}"
    ds = RetrievalDataset("synthetic-offset", corpus, queries, pairs, partition, FULL_CORPUS)
    stub = StubProvider.with_random_offset(d, seed=seed, offset_scale=offset_scale, tag=tag,
                                           distribution=distribution)
    return ds, stub
