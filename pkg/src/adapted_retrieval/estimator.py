"""scikit-learn style wrapper around the adapter trainer.

Works directly on embedding arrays, so it composes with pipelines, ``clone``
and ``get_params``/``set_params`` like any other transformer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import adapter as adapter_mod
from . import evaluation
from . import index as index_mod
from .trainer import TrainConfig, TrainingProblem, fit_problem, validation_split


def _corpus_ids(n):
    width = max(1, len(str(n - 1)))
    return [f"{i:0{width}d}" for i in range(n)]


class AdaptedDenseRetriever(TransformerMixin, BaseEstimator):
    """Residual key-value adapter trained with global hard negatives.

    Parameters mirror :class:`~adapted_retrieval.trainer.TrainConfig`;
    ``base_lr`` and ``step_every_epochs`` default per ``mode``.

    ``fit(X, y, corpus=C)`` takes one row of ``X`` per (query, positive) pair
    and ``y`` holding the positive's row in ``C``. Rows sharing a
    ``query_groups`` label are one query with several positives.
    """

    def __init__(self, mode="adr", h=16, base_lr=None, gamma=0.5, step_every_epochs=None, max_epochs=500,
                 batch_size=64, margin=0.1, seed=0, selection_metric="ndcg_at_10", validation_fraction=0.1,
                 init_key_scale=1.0, temperature=1.0, n_negatives=1):
        self.mode = mode
        self.h = h
        self.base_lr = base_lr
        self.gamma = gamma
        self.step_every_epochs = step_every_epochs
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.margin = margin
        self.seed = seed
        self.selection_metric = selection_metric
        self.validation_fraction = validation_fraction
        self.init_key_scale = init_key_scale
        self.temperature = temperature
        self.n_negatives = n_negatives

    def _train_config(self):
        return TrainConfig(**self.get_params())

    def fit(self, X, y, corpus, query_groups=None):
        X = check_array(X, dtype=np.float64)
        C = check_array(corpus, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if X.shape[1] != C.shape[1]:
            raise ValueError(f"X has {X.shape[1]} features but corpus has {C.shape[1]}")
        if y.size and (y.min() < 0 or y.max() >= C.shape[0]):
            raise ValueError("y must index rows of corpus")
        groups = np.arange(X.shape[0]) if query_groups is None else np.asarray(query_groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("query_groups must have one label per row of X")

        cfg = self._train_config()
        ids = _corpus_ids(C.shape[0])
        index = index_mod.CorpusIndex(ids, C)
        query_vectors, qrels = {}, {}
        for row, (g, target) in enumerate(zip(groups, y)):
            qid = f"q{g}"
            query_vectors.setdefault(qid, X[row])
            qrels.setdefault(qid, {})[ids[target]] = 1
        fit_q, val_q = validation_split(list(qrels), cfg.validation_fraction, cfg.seed)
        problem = TrainingProblem.build(query_vectors, index, {q: set(qrels[q]) for q in fit_q})
        result = fit_problem(problem, cfg, query_vectors, {q: qrels[q] for q in val_q})

        self.query_params_ = result.query_params
        self.corpus_params_ = result.corpus_params
        self.report_ = result.report
        self.corpus_ids_ = ids
        self.index_ = index if result.corpus_params is None else index.refreshed(result.corpus_params)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "query_params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Adapted query embeddings ``Tr(X)``."""
        return adapter_mod.transform(self._check_X(X), self.query_params_)

    def transform_corpus(self, C):
        """Adapted corpus embeddings ``Tr'(C)``; unchanged in ``adr`` mode."""
        C = self._check_X(C)
        return C.copy() if self.corpus_params_ is None else adapter_mod.transform(C, self.corpus_params_)

    def kneighbors(self, X, n_neighbors=10):
        """Top ``n_neighbors`` corpus rows per query as ``(scores, indices)``."""
        X = self._check_X(X)
        k = min(n_neighbors, len(self.corpus_ids_))
        scores = np.empty((X.shape[0], k))
        indices = np.empty((X.shape[0], k), dtype=np.int64)
        for i, x in enumerate(X):
            ranked = index_mod.retrieve(x, self.index_, k, self.mode, self.query_params_, self.corpus_params_)
            scores[i] = ranked.scores
            indices[i] = [int(c) for c in ranked.ids]
        return scores, indices

    def predict(self, X):
        """Row index of the top-ranked corpus element for each query."""
        return self.kneighbors(X, 1)[1][:, 0]

    def score(self, X, y, k=10):
        """Mean nDCG@k with ``y`` giving each query's single positive row."""
        _, indices = self.kneighbors(X, k)
        vals = [
            evaluation.ndcg_at_k(list(row), {int(t): 1}, k)
            for row, t in zip(indices, np.asarray(y).ravel())
        ]
        return float(np.mean(vals))
