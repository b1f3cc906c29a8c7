"""Training of the query adapter (and the corpus adapter in ``adr_full`` mode).

Each training pair ``(q, c)`` is scored against a single global hard negative,
the highest-scoring non-positive corpus element under the *current* adapters,
found again for every batch. The loss is a cosine margin ranking loss::

    max(0, margin - cos(Tr(q), Tr'(c)) + cos(Tr(q), Tr'(c_neg)))

averaged over the batch and minimised with Adam under a step learning-rate
schedule.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time

import numpy as np

from . import adapter as adapter_mod
from . import evaluation
from . import index as index_mod
from .errors import AdaptedRetrievalError, ConfigurationError, DegenerateVectorError, TrainingDivergenceError
from .numerics import DTYPE, AdamState, adam_update, row_norms, scheduled_lr
from .utils import atomic_write_json

logger = logging.getLogger(__name__)

MODE_DEFAULTS = {
    "adr": {"base_lr": 1e-3, "step_every_epochs": 100},
    "adr_full": {"base_lr": 1e-2, "step_every_epochs": 50},
}
NARROW_HIDDEN_SIZES = (16, 32, 64, 128)
WIDE_HIDDEN_SIZES = (64, 128, 256, 512, 1024, 1536)


@dataclasses.dataclass
class TrainConfig:
    mode: str = "adr"
    h: int = 16
    base_lr: float | None = None
    gamma: float = 0.5
    step_every_epochs: int | None = None
    max_epochs: int = 500
    batch_size: int = 64
    margin: float = 0.1
    seed: int = 0
    selection_metric: str = "ndcg_at_10"
    validation_fraction: float = 0.1
    init_key_scale: float = 1.0
    temperature: float = 1.0
    n_negatives: int = 1
    refresh_every: int = 1
    divergence_factor: float = 10.0
    check_hard_negatives: bool = False

    def __post_init__(self):
        if self.mode not in MODE_DEFAULTS:
            raise ConfigurationError(f"mode must be one of {sorted(MODE_DEFAULTS)}, got {self.mode!r}")
        for key, value in MODE_DEFAULTS[self.mode].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.selection_metric not in ("ndcg_at_10", "loss"):
            raise ConfigurationError(f"unknown selection_metric {self.selection_metric!r}")
        if self.max_epochs < 0 or self.batch_size < 1 or self.step_every_epochs < 1:
            raise ConfigurationError("max_epochs >= 0, batch_size >= 1 and step_every_epochs >= 1 required")
        if not self.margin > 0:
            raise ConfigurationError("margin must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in [0, 1)")
        if self.n_negatives < 1 or self.refresh_every < 1:
            raise ConfigurationError("n_negatives and refresh_every must be >= 1")

    def adapter_config(self, role="query"):
        seed = self.seed if role == "query" else self.seed + 1
        return adapter_mod.AdapterConfig(self.h, self.init_key_scale, seed, self.temperature)

    def lr_at(self, epoch):
        return scheduled_lr(self.base_lr, self.gamma, self.step_every_epochs, epoch)

    def to_dict(self):
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# loss


@dataclasses.dataclass
class TripletLossSpec:
    margin: float = 0.1
    form: str = "margin_ranking"

    def __post_init__(self):
        if self.form != "margin_ranking":
            raise ConfigurationError(f"unsupported loss form {self.form!r}")
        if not self.margin > 0:
            raise ConfigurationError("margin must be positive")


def _cos_rows(A, B):
    """Row-wise cosine and its gradients with respect to both rows."""
    with np.errstate(over="ignore", invalid="ignore"):
        na, nb = row_norms(A), row_norms(B)
        if np.any(na == 0.0) or np.any(nb == 0.0):
            raise DegenerateVectorError("zero-norm vector in cosine")
        dot = (A * B).sum(axis=1)
        cos = dot / (na * nb)
    # overflowed norms would otherwise pass as cosine 0; surface them as NaN
    cos[~np.isfinite(na * nb)] = np.nan
    gA = B / (na * nb)[:, None] - (cos / na**2)[:, None] * A
    gB = A / (na * nb)[:, None] - (cos / nb**2)[:, None] * B
    return cos, gA, gB


def triplet_loss(e, e_pos, e_neg, spec=None):
    """``max(0, margin - cos(e, e_pos) + cos(e, e_neg))`` and its gradients.

    Returns ``(value, (d_e, d_pos, d_neg))``. Gradients are zero where the
    hinge is inactive.
    """
    spec = spec or TripletLossSpec()
    E, P, N = (np.asarray(x, dtype=DTYPE)[None, :] for x in (e, e_pos, e_neg))
    cp, gEp, gP = _cos_rows(E, P)
    cn, gEn, gN = _cos_rows(E, N)
    raw = spec.margin - cp[0] + cn[0]
    if raw <= 0.0:
        zero = np.zeros(E.shape[1])
        return 0.0, (zero, zero.copy(), zero.copy())
    return float(raw), ((gEn - gEp)[0], -gP[0], gN[0])


def batch_loss_and_grads(Eq, Ep, En, query_params, corpus_params, margin):
    """Mean triplet loss over a batch and its gradients w.r.t. adapter parameters.

    ``Eq``, ``Ep``, ``En`` are raw embeddings (query, positive, negative), one
    triplet per row. ``corpus_params`` None means ``Tr'`` is the identity.
    Returns ``(mean_loss, per_row_loss, grads)`` where ``grads`` maps
    ``K``, ``V`` (and ``K_corpus``, ``V_corpus``) to arrays.
    """
    n = Eq.shape[0]
    A, tape_q = adapter_mod.forward(Eq, query_params)
    if corpus_params is not None:
        B, tape_c = adapter_mod.forward(np.vstack([Ep, En]), corpus_params)
        P, N = B[:n], B[n:]
    else:
        P, N = Ep, En
    cp, gAp, gP = _cos_rows(A, P)
    cn, gAn, gN = _cos_rows(A, N)
    raw = margin - cp + cn
    losses = np.maximum(raw, 0.0)
    active = (raw > 0.0).astype(DTYPE)[:, None] / n
    dA = (gAn - gAp) * active
    dK, dV, _ = adapter_mod.transform_grad(tape_q, dA)
    grads = {"K": dK, "V": dV}
    if corpus_params is not None:
        dB = np.vstack([-gP * active, gN * active])
        dKc, dVc, _ = adapter_mod.transform_grad(tape_c, dB)
        grads["K_corpus"] = dKc
        grads["V_corpus"] = dVc
    return float(losses.mean()), losses, grads


# --------------------------------------------------------------------------
# training problem and state


@dataclasses.dataclass
class TrainingProblem:
    """Array view of the training data.

    ``index`` holds the negative pool with rows in ascending id order.
    ``pairs`` is an ``(n, 2)`` array of (query row, corpus row).
    ``positive_rows[qrow]`` are the corpus rows excluded as negatives.
    """

    query_ids: list
    query_emb: np.ndarray
    index: index_mod.CorpusIndex
    pairs: np.ndarray
    positive_rows: list

    @classmethod
    def build(cls, query_vectors, index, qrels):
        """``qrels`` maps query id to the set (or dict) of positive corpus ids."""
        if list(index.ids) != sorted(index.ids):
            index = index_mod.CorpusIndex(sorted(index.ids), index.raw[np.argsort(index.ids, kind="stable")])
        query_ids = sorted(qrels)
        emb = np.vstack([query_vectors[q] for q in query_ids]) if query_ids else np.empty((0, index.d))
        pairs, positive_rows = [], []
        for qrow, q in enumerate(query_ids):
            rows = sorted(index.row(c) for c in qrels[q])
            positive_rows.append(frozenset(rows))
            pairs.extend((qrow, r) for r in rows)
        return cls(query_ids, emb, index, np.asarray(pairs, dtype=np.int64).reshape(-1, 2), positive_rows)

    def __len__(self):
        return len(self.pairs)


@dataclasses.dataclass
class TrainState:
    query_params: adapter_mod.AdapterParams
    corpus_params: adapter_mod.AdapterParams | None
    adam: dict
    rng: np.random.Generator
    epoch: int = 0
    loss_history: list = dataclasses.field(default_factory=list)
    metric_history: list = dataclasses.field(default_factory=list)
    lr_history: list = dataclasses.field(default_factory=list)
    best_query_params: adapter_mod.AdapterParams | None = None
    best_corpus_params: adapter_mod.AdapterParams | None = None
    best_metric: float | None = None
    best_epoch: int = 0

    @classmethod
    def initial(cls, cfg, d):
        qp = adapter_mod.init(cfg.adapter_config("query"), d)
        cp = adapter_mod.init(cfg.adapter_config("corpus"), d) if cfg.mode == "adr_full" else None
        hyper = dict(base_lr=cfg.base_lr, gamma=cfg.gamma, step_every=cfg.step_every_epochs)
        adam = {"K": AdamState.zeros_like(qp.K, **hyper), "V": AdamState.zeros_like(qp.V, **hyper)}
        if cp is not None:
            adam["K_corpus"] = AdamState.zeros_like(cp.K, **hyper)
            adam["V_corpus"] = AdamState.zeros_like(cp.V, **hyper)
        return cls(qp, cp, adam, np.random.default_rng([cfg.seed, 0x7EA1]))

    def consider(self, metric, higher_is_better):
        """Record ``metric`` for the current params and keep them if at least as good as the best so far (latest tie wins)."""
        self.metric_history.append(metric)
        better = (
            self.best_metric is None
            or (higher_is_better and metric >= self.best_metric)
            or (not higher_is_better and metric <= self.best_metric)
        )
        if better:
            self.best_metric = metric
            self.best_epoch = self.epoch
            self.best_query_params = self.query_params
            self.best_corpus_params = self.corpus_params


def _apply_adam(state, grads, epoch):
    qp, cp = state.query_params, state.corpus_params
    targets = {"K": qp.K, "V": qp.V}
    if cp is not None:
        targets.update(K_corpus=cp.K, V_corpus=cp.V)
    new = {}
    for name, param in targets.items():
        new[name], state.adam[name] = adam_update(param, grads[name], state.adam[name], epoch, name=name)
    state.query_params = qp.replace(K=new["K"], V=new["V"])
    if cp is not None:
        state.corpus_params = cp.replace(K=new["K_corpus"], V=new["V_corpus"])


def _negative_rows(Q_adapted, positive_rows, C_adapted, n_negatives):
    if n_negatives == 1:
        return index_mod.hard_negatives_batch(Q_adapted, positive_rows, C_adapted)[:, None]
    Qn = Q_adapted / row_norms(Q_adapted)[:, None]
    Cn = C_adapted / row_norms(C_adapted)[:, None]
    S = Qn @ Cn.T
    for i, rows in enumerate(positive_rows):
        S[i, list(rows)] = -np.inf
    available = min(S.shape[1] - max(len(r) for r in positive_rows), n_negatives)
    return np.argsort(-S, axis=1, kind="stable")[:, :available]


def train_epoch(state, problem, cfg, hard_negative_log=None):
    """One pass over ``problem.pairs`` in a seeded shuffled order.

    Mutates and returns ``state``. When ``hard_negative_log`` is a list, the
    ``(query_id, positive ids, negative id)`` used for every triplet is
    appended to it.
    """
    if len(problem) == 0:
        raise ConfigurationError("no training pairs")
    epoch = state.epoch
    order = state.rng.permutation(len(problem))
    raw = problem.index.raw
    total, count = 0.0, 0
    C_adapted = raw
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = problem.pairs[order[start : start + cfg.batch_size]]
        qrows, crows = batch[:, 0], batch[:, 1]
        Eq = problem.query_emb[qrows]
        if state.corpus_params is not None and b % cfg.refresh_every == 0:
            C_adapted = adapter_mod.transform(raw, state.corpus_params)
        Q_adapted = adapter_mod.transform(Eq, state.query_params)
        positives = [problem.positive_rows[q] for q in qrows]
        neg = _negative_rows(Q_adapted, positives, C_adapted, cfg.n_negatives)
        for i, q in enumerate(qrows):
            if any(r in positives[i] for r in neg[i]):
                raise AssertionError("hard negative drawn from the positive set")
        if cfg.check_hard_negatives or hard_negative_log is not None:
            _cross_check_negatives(problem, state, qrows, neg[:, 0], cfg, hard_negative_log)
        reps = neg.shape[1]
        Eq_rep = np.repeat(Eq, reps, axis=0)
        Ep_rep = np.repeat(raw[crows], reps, axis=0)
        En = raw[neg.reshape(-1)]
        loss, losses, grads = batch_loss_and_grads(
            Eq_rep, Ep_rep, En, state.query_params, state.corpus_params, cfg.margin
        )
        if not math.isfinite(loss):
            raise TrainingDivergenceError(
                f"non-finite loss at epoch {epoch}, batch {b}",
                diagnostics={"epoch": epoch, "batch": b, "batch_size": len(batch)},
            )
        _apply_adam(state, grads, epoch)
        total += float(losses.sum()) / reps
        count += len(batch)
    state.loss_history.append(total / count)
    state.lr_history.append(cfg.lr_at(epoch))
    state.epoch = epoch + 1
    return state


def _cross_check_negatives(problem, state, qrows, neg_rows, cfg, log):
    """Compare vectorised hard negatives with the per-query index lookup."""
    index = problem.index
    for q, row in zip(qrows, neg_rows):
        positive_ids = {index.ids[r] for r in problem.positive_rows[q]}
        expected = index_mod.hard_negative(
            problem.query_emb[q], positive_ids, state.query_params, state.corpus_params, index
        )
        got = index.ids[row]
        if log is not None:
            log.append((problem.query_ids[q], frozenset(positive_ids), got))
        if cfg.check_hard_negatives and got != expected:
            raise AssertionError(f"hard negative mismatch for {problem.query_ids[q]}: {got} != {expected}")


# --------------------------------------------------------------------------
# fit / sweep


@dataclasses.dataclass
class TrainReport:
    config: dict
    d: int
    train_pairs: int
    validation_queries: int
    loss_history: list
    metric_history: list
    lr_history: list
    selection_metric: str
    best_epoch: int
    best_metric: float
    baseline_metric: float
    wall_clock_seconds: float
    notes: list = dataclasses.field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        return atomic_write_json(path, self.to_dict())


@dataclasses.dataclass
class FitResult:
    query_params: adapter_mod.AdapterParams
    corpus_params: adapter_mod.AdapterParams | None
    report: TrainReport

    def training_metadata(self):
        """Deterministic subset of the report, suitable for checkpoints."""
        r = self.report
        return {
            "config": r.config,
            "best_epoch": r.best_epoch,
            "best_metric": r.best_metric,
            "selection_metric": r.selection_metric,
            "loss_history": r.loss_history,
        }


def validation_split(query_ids, fraction, seed):
    """Hold out ``floor(fraction * n)`` query ids (at least one when fraction > 0 and n >= 2)."""
    query_ids = sorted(query_ids)
    n = len(query_ids)
    if fraction <= 0 or n < 2:
        return query_ids, []
    n_val = min(max(1, int(math.floor(fraction * n))), n - 1)
    perm = np.random.default_rng([seed, 0x5E1EC7]).permutation(n)
    val = sorted(query_ids[i] for i in perm[:n_val])
    held = set(val)
    return [q for q in query_ids if q not in held], val


class _Selector:
    """Evaluates the selection metric for the current params."""

    def __init__(self, cfg, problem, val_problem, val_qrels, query_vectors):
        self.cfg = cfg
        self.problem = problem
        self.val_problem = val_problem
        self.val_qrels = val_qrels
        self.query_vectors = query_vectors
        self.higher_is_better = cfg.selection_metric == "ndcg_at_10"

    def __call__(self, qp, cp):
        if self.cfg.selection_metric == "ndcg_at_10":
            return self._ndcg(qp, cp)
        return self._loss(qp, cp)

    def _ndcg(self, qp, cp):
        index = self.val_problem.index
        if cp is not None:
            index = index.refreshed(cp)
        rankings = {
            q: index_mod.retrieve(self.query_vectors[q], index, 10, self.cfg.mode, qp, cp, query_id=q)
            for q in sorted(self.val_qrels)
        }
        return evaluation.evaluate_rankings(rankings, self.val_qrels, ks=(10,)).ndcg[10]

    def _loss(self, qp, cp):
        p = self.val_problem
        raw = p.index.raw
        C = raw if cp is None else adapter_mod.transform(raw, cp)
        Q = adapter_mod.transform(p.query_emb[p.pairs[:, 0]], qp)
        neg = index_mod.hard_negatives_batch(Q, [p.positive_rows[q] for q in p.pairs[:, 0]], C)
        loss, _, _ = batch_loss_and_grads(
            p.query_emb[p.pairs[:, 0]], raw[p.pairs[:, 1]], raw[neg], qp, cp, self.cfg.margin
        )
        return loss


def fit_problem(problem, cfg, query_vectors=None, val_qrels=None, notes=None):
    """Train on a prepared :class:`TrainingProblem`.

    Selection uses ``val_qrels`` (``{query_id: {corpus_id: grade}}``) against
    the same negative pool; without validation queries the training queries
    are used. Returns a :class:`FitResult` holding the best snapshot.
    """
    start = time.perf_counter()
    d = problem.index.d
    notes = list(notes or [])
    if not val_qrels:
        notes.append("no validation queries; selection metric computed on training queries")
        val_qrels = {q: {problem.index.ids[r]: 1 for r in problem.positive_rows[i]}
                     for i, q in enumerate(problem.query_ids)}
        query_vectors = {q: problem.query_emb[i] for i, q in enumerate(problem.query_ids)}
    val_problem = TrainingProblem.build(query_vectors, problem.index, {q: set(v) for q, v in val_qrels.items()})
    selector = _Selector(cfg, problem, val_problem, val_qrels, query_vectors)

    state = TrainState.initial(cfg, d)
    baseline_metric = selector(state.query_params, state.corpus_params)
    state.consider(baseline_metric, selector.higher_is_better)
    initial_loss = None
    for _ in range(cfg.max_epochs):
        train_epoch(state, problem, cfg)
        epoch_loss = state.loss_history[-1]
        if initial_loss is None:
            initial_loss = epoch_loss
        elif initial_loss > 0 and epoch_loss > cfg.divergence_factor * initial_loss:
            raise TrainingDivergenceError(
                f"epoch {state.epoch - 1} loss {epoch_loss:.4g} exceeds "
                f"{cfg.divergence_factor}x the first epoch loss {initial_loss:.4g}",
                diagnostics={"epoch": state.epoch - 1, "loss": epoch_loss},
            )
        state.consider(selector(state.query_params, state.corpus_params), selector.higher_is_better)

    report = TrainReport(
        config=cfg.to_dict(),
        d=d,
        train_pairs=len(problem),
        validation_queries=len(val_qrels),
        loss_history=list(state.loss_history),
        metric_history=list(state.metric_history),
        lr_history=list(state.lr_history),
        selection_metric=cfg.selection_metric,
        best_epoch=state.best_epoch,
        best_metric=state.best_metric,
        baseline_metric=baseline_metric,
        wall_clock_seconds=time.perf_counter() - start,
        notes=notes,
    )
    return FitResult(state.best_query_params, state.best_corpus_params, report)


def embed_dataset(ds, embedder, partitions=None, query_ids=None):
    """Embed the queries of ``partitions`` and every corpus element they may retrieve.

    Returns ``(query_vectors, corpus_vectors)`` dicts keyed by id.
    """
    partitions = partitions or ds.partitions()
    qids = sorted(query_ids) if query_ids is not None else sorted(
        q for p in partitions for q in ds.query_ids(p)
    )
    cids = sorted({c for p in partitions for c in ds.corpus_ids(p)})
    qv = embedder.embed([ds.queries[q] for q in qids]) if qids else np.empty((0, embedder.dimension))
    cv = embedder.embed([ds.corpus[c] for c in cids]) if cids else np.empty((0, embedder.dimension))
    return dict(zip(qids, qv)), dict(zip(cids, cv))


def build_index(corpus_vectors, ids):
    ids = sorted(ids)
    return index_mod.CorpusIndex(ids, np.vstack([corpus_vectors[c] for c in ids]))


def fit(ds, embedder, cfg, partition="train", embeddings=None):
    """Train adapters on the ``partition`` pairs of ``ds``.

    ``embeddings`` may carry precomputed ``(query_vectors, corpus_vectors)``.
    """
    if embeddings is None:
        embeddings = embed_dataset(ds, embedder, [partition])
    query_vectors, corpus_vectors = embeddings
    train_qids = ds.query_ids(partition)
    if not train_qids:
        raise ConfigurationError(f"dataset {ds.name!r} has no {partition} queries")
    fit_qids, val_qids = validation_split(train_qids, cfg.validation_fraction, cfg.seed)
    qrels = ds.qrels(partition)
    index = build_index(corpus_vectors, ds.corpus_ids(partition))
    problem = TrainingProblem.build(query_vectors, index, {q: set(qrels[q]) for q in fit_qids})
    val_qrels = {q: qrels[q] for q in val_qids}
    return fit_problem(problem, cfg, query_vectors, val_qrels)


@dataclasses.dataclass
class SweepCell:
    config: TrainConfig
    result: FitResult | None = None
    error: str | None = None

    @property
    def failed(self):
        return self.result is None


@dataclasses.dataclass
class SweepResult:
    best_config: TrainConfig
    best: FitResult
    cells: list
    notes: list

    def to_dict(self):
        return {
            "best_config": self.best_config.to_dict(),
            "notes": self.notes,
            "cells": [
                {
                    "config": c.config.to_dict(),
                    "failed": c.failed,
                    "error": c.error,
                    "best_metric": None if c.failed else c.result.report.best_metric,
                    "best_epoch": None if c.failed else c.result.report.best_epoch,
                }
                for c in self.cells
            ],
        }


def default_grid(base, d, sizes=WIDE_HIDDEN_SIZES):
    """One config per hidden size; sizes at or above ``d`` are clamped to ``d - 1``."""
    grid, seen = [], set()
    for h in sizes:
        h = min(h, d - 1)
        if h in seen:
            continue
        seen.add(h)
        grid.append(dataclasses.replace(base, h=h))
    return grid


def sweep(ds, embedder, grid, partition="train", embeddings=None):
    """Fit every config; pick the best validation metric, ties going to smaller ``h``."""
    if not grid:
        raise ConfigurationError("empty hyperparameter grid")
    if embeddings is None:
        embeddings = embed_dataset(ds, embedder, [partition])
    d = embedder.dimension
    cells, notes = [], []
    for cfg in grid:
        if cfg.h >= d:
            notes.append(f"h={cfg.h} clamped to {d - 1} (h must be smaller than d={d})")
            cfg = dataclasses.replace(cfg, h=d - 1)
        try:
            cells.append(SweepCell(cfg, fit(ds, embedder, cfg, partition, embeddings)))
        except AdaptedRetrievalError as exc:
            logger.warning("sweep cell h=%s failed: %s", cfg.h, exc)
            cells.append(SweepCell(cfg, error=f"{type(exc).__name__}: {exc}"))
    ok = [c for c in cells if not c.failed]
    if not ok:
        raise TrainingDivergenceError("every sweep configuration failed")

    def key(cell):
        m = cell.result.report.best_metric
        signed = -m if cell.config.selection_metric == "ndcg_at_10" else m
        return (signed, cell.config.h)

    best = min(ok, key=key)
    return SweepResult(best.config, best.result, cells, notes)
