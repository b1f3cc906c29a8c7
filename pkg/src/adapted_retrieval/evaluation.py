"""nDCG@k and side-by-side system comparison tables."""

from __future__ import annotations

import dataclasses
import math

from . import index as index_mod
from .errors import UndefinedMetricError

DEFAULT_KS = (1, 3, 5, 10)
SYSTEM_ORDER = ("baseline", "adr", "adr_full")


def _gain(rel, gain):
    if gain == "exponential":
        return 2.0**rel - 1.0
    if gain == "linear":
        return float(rel)
    raise ValueError(f"unknown gain {gain!r}")


def dcg(grades, k, gain="exponential"):
    return sum(_gain(rel, gain) / math.log2(i + 2) for i, rel in enumerate(grades[:k]))


def ndcg_at_k(ranking, qrels, k, gain="exponential"):
    """nDCG@k of a ranking against ``{corpus_id: grade}``.

    ``ranking`` is a :class:`~adapted_retrieval.index.RankedList` or a sequence
    of corpus ids. Unjudged ids count as grade 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = {c: g for c, g in qrels.items() if g > 0}
    if not relevant:
        raise UndefinedMetricError("nDCG is undefined for a query without relevant documents")
    ids = ranking.ids if isinstance(ranking, index_mod.RankedList) else list(ranking)
    grades = [relevant.get(c, 0) for c in ids]
    ideal = sorted(relevant.values(), reverse=True)
    return dcg(grades, k, gain) / dcg(ideal, k, gain)


@dataclasses.dataclass
class SystemResult:
    """One row of a :class:`MetricsTable`."""

    name: str
    ndcg: dict  # k -> mean
    per_query: dict  # query_id -> {k: value}
    excluded_queries: int = 0

    def to_dict(self):
        return {
            "name": self.name,
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "per_query": {
                q: {str(k): v for k, v in sorted(vals.items())} for q, vals in sorted(self.per_query.items())
            },
            "excluded_queries": self.excluded_queries,
        }


@dataclasses.dataclass
class MetricsTable:
    dataset: str
    ks: tuple
    systems: list = dataclasses.field(default_factory=list)

    def add(self, result):
        self.systems.append(result)
        return self

    def row(self, name):
        for s in self.systems:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self):
        return {"dataset": self.dataset, "systems": [s.to_dict() for s in self.systems]}


def evaluate_rankings(rankings, qrels, ks=DEFAULT_KS, name="system", gain="exponential"):
    """Average nDCG over ``{query_id: RankedList}``; queries without positives are excluded."""
    per_query, excluded = {}, 0
    for qid in sorted(rankings):
        judged = qrels.get(qid, {})
        if not any(g > 0 for g in judged.values()):
            excluded += 1
            continue
        per_query[qid] = {k: ndcg_at_k(rankings[qid], judged, k, gain) for k in ks}
    means = {}
    for k in ks:
        vals = [per_query[q][k] for q in sorted(per_query)]
        means[k] = math.fsum(vals) / len(vals) if vals else float("nan")
    return SystemResult(name, means, per_query, excluded)


def evaluate_system(ds, index, query_embeddings, mode="baseline", query_params=None, corpus_params=None,
                    ks=DEFAULT_KS, partition="test", name=None, gain="exponential", query_ids=None):
    """Retrieve once per query at depth ``max(ks)`` and score every k from that list."""
    qids = sorted(query_ids) if query_ids is not None else ds.query_ids(partition)
    if not qids:
        raise ValueError(f"partition {partition!r} has no queries")
    qrels = ds.qrels()
    depth = max(ks)
    if mode == "adr_full" and corpus_params is not None:
        if index.adapted_fingerprint != corpus_params.fingerprint():
            index = index.refreshed(corpus_params)
    rankings = {
        q: index_mod.retrieve(query_embeddings[q], index, depth, mode, query_params, corpus_params, query_id=q)
        for q in qids
    }
    return evaluate_rankings(rankings, {q: qrels.get(q, {}) for q in qids}, ks, name or mode, gain)


# --------------------------------------------------------------------------
# rendering


def _winners(values, tol=1e-12):
    finite = [v for v in values if not math.isnan(v)]
    if not finite:
        return set()
    best = max(finite)
    return {i for i, v in enumerate(values) if not math.isnan(v) and abs(v - best) <= tol}


def _order_systems(systems):
    rank = {n: i for i, n in enumerate(SYSTEM_ORDER)}
    return sorted(systems, key=lambda s: (rank.get(s.name, len(rank)), s.name))


def render_table(tables, precision=4):
    """Fixed-width text tables, one per dataset.

    In each column the best value is marked ``*``; when several systems share
    the best value they are all marked ``=``.
    """
    if isinstance(tables, MetricsTable):
        tables = [tables]
    blocks = []
    for table in tables:
        systems = _order_systems(table.systems)
        if not systems:
            raise ValueError(f"{table.dataset}: no systems to render")
        headers = ["system"] + [f"nDCG@{k}" for k in table.ks]
        cells = [[s.name] for s in systems]
        for k in table.ks:
            col = [s.ndcg.get(k, float("nan")) for s in systems]
            win = _winners(col)
            mark = "=" if len(win) > 1 else "*"
            for i, v in enumerate(col):
                cells[i].append(f"{v:.{precision}f}" + (mark if i in win else " "))
        widths = [max(len(headers[j]), *(len(r[j]) for r in cells)) for j in range(len(headers))]
        lines = [f"dataset: {table.dataset}"]
        lines.append("  ".join(h.ljust(widths[0]) if j == 0 else h.rjust(widths[j]) for j, h in enumerate(headers)))
        lines.append("  ".join("-" * w for w in widths))
        for r in cells:
            lines.append("  ".join(c.ljust(widths[0]) if j == 0 else c.rjust(widths[j]) for j, c in enumerate(r)))
        excluded = {s.name: s.excluded_queries for s in systems if s.excluded_queries}
        if excluded:
            lines.append(f"excluded queries (no relevant docs): {excluded}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def report_json(tables):
    """JSON twin of :func:`render_table`: one document per dataset."""
    if isinstance(tables, MetricsTable):
        return tables.to_dict()
    return [t.to_dict() for t in tables]

