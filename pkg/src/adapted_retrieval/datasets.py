"""Retrieval datasets: BEIR directories and NL-to-X pair files.

A :class:`RetrievalDataset` keeps the corpus, the queries, graded relevance
pairs and a partition label per query. ``eval_corpus_scope`` says whether a
partition retrieves from the whole corpus (BEIR) or only from the targets of
its own pairs (pair files, where train and test code corpora differ).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import IngestionError, ReferentialIntegrityError, SplitError
from .provider import normalize_text
from .utils import atomic_write_json, canonical_json, sha256_hex

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "dev", "test")
FULL_CORPUS = "full_corpus"
PARTITION_CORPUS = "partition_corpus"


@dataclasses.dataclass
class RetrievalDataset:
    name: str
    corpus: dict
    queries: dict
    pairs: list  # [(query_id, corpus_id, relevance)]
    partition: dict  # query_id -> "train" | "dev" | "test"
    eval_corpus_scope: str = FULL_CORPUS

    def __post_init__(self):
        self.pairs = [(str(q), str(c), int(r)) for q, c, r in self.pairs]
        self.validate()

    def validate(self):
        if self.eval_corpus_scope not in (FULL_CORPUS, PARTITION_CORPUS):
            raise IngestionError(f"unknown eval_corpus_scope {self.eval_corpus_scope!r}")
        offenders = []
        for q, c, r in self.pairs:
            if q not in self.queries:
                offenders.append(("query", q))
            if c not in self.corpus:
                offenders.append(("corpus", c))
            if r < 1:
                offenders.append(("relevance", f"{q}/{c}={r}"))
        for q in self.partition:
            if q not in self.queries:
                offenders.append(("partition", q))
        paired = {q for q, _, _ in self.pairs}
        for q in paired:
            if q not in self.partition:
                offenders.append(("unpartitioned", q))
        for q, part in self.partition.items():
            if part not in PARTITIONS:
                offenders.append(("partition-label", f"{q}={part}"))
            if q not in paired:
                offenders.append(("no-positive", q))
        if offenders:
            shown = ", ".join(f"{kind}:{ident}" for kind, ident in offenders[:10])
            raise ReferentialIntegrityError(
                f"{self.name}: {len(offenders)} referential-integrity violations ({shown})", offenders
            )

    # -- views -------------------------------------------------------------

    def partitions(self):
        return sorted(set(self.partition.values()), key=PARTITIONS.index)

    def query_ids(self, partition=None):
        return sorted(q for q, p in self.partition.items() if partition is None or p == partition)

    def qrels(self, partition=None):
        """``{query_id: {corpus_id: grade}}`` restricted to one partition."""
        out = defaultdict(dict)
        for q, c, r in self.pairs:
            if partition is None or self.partition[q] == partition:
                out[q][c] = max(r, out[q].get(c, 0))
        return dict(out)

    def positives(self, query_id):
        return {c for q, c, _ in self.pairs if q == query_id}

    def negatives(self, query_id, partition=None):
        pool = set(self.corpus_ids(partition if partition else self.partition[query_id]))
        return pool - self.positives(query_id)

    def pairs_in(self, partition):
        return [p for p in self.pairs if self.partition[p[0]] == partition]

    def corpus_ids(self, partition=None):
        """Retrieval pool for ``partition``, sorted by id."""
        if self.eval_corpus_scope == FULL_CORPUS or partition is None:
            return sorted(self.corpus)
        return sorted({c for q, c, _ in self.pairs if self.partition[q] == partition})

    def counts(self):
        out = {"corpus": len(self.corpus), "queries": len(self.queries)}
        for part in self.partitions():
            out[f"{part}_queries"] = len(self.query_ids(part))
            out[f"{part}_pairs"] = len(self.pairs_in(part))
        return out

    # -- serialisation -----------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "eval_corpus_scope": self.eval_corpus_scope,
            "corpus": dict(sorted(self.corpus.items())),
            "queries": dict(sorted(self.queries.items())),
            "pairs": [list(p) for p in sorted(self.pairs)],
            "partition": dict(sorted(self.partition.items())),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            corpus=dict(d["corpus"]),
            queries=dict(d["queries"]),
            pairs=[tuple(p) for p in d["pairs"]],
            partition=dict(d["partition"]),
            eval_corpus_scope=d["eval_corpus_scope"],
        )

    def content_hash(self):
        return sha256_hex(canonical_json(self.to_dict()))

    def __eq__(self, other):
        if not isinstance(other, RetrievalDataset):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def save(ds, path):
    return atomic_write_json(path, ds.to_dict())


def load(path):
    return RetrievalDataset.from_dict(json.loads(Path(path).read_text("utf-8")))


# --------------------------------------------------------------------------
# BEIR


def _read_jsonl(path):
    if not path.exists():
        raise IngestionError(f"missing file: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return records


def _read_qrels(path):
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            return rows
        if [h.strip() for h in header[:3]] != ["query-id", "corpus-id", "score"]:
            raise IngestionError(f"{path}: expected header 'query-id\\tcorpus-id\\tscore', got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 3:
                raise IngestionError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                score = int(float(row[2]))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: bad score {row[2]!r}") from exc
            rows.append((row[0].strip(), row[1].strip(), score))
    return rows


def load_beir(directory, name=None, train_split=None):
    """Load a BEIR-layout directory.

    ``train_split`` picks the qrels file used as the training partition:
    ``"train"`` (default when ``qrels/train.tsv`` exists) or ``"dev"`` for
    datasets such as NFCorpus that train on dev. ``qrels/test.tsv`` is required.
    Zero-score qrels rows are dropped.
    """
    directory = Path(directory)
    name = name or directory.name
    corpus = {}
    for rec in _read_jsonl(directory / "corpus.jsonl"):
        try:
            cid = str(rec["_id"])
        except KeyError as exc:
            raise IngestionError(f"{directory / 'corpus.jsonl'}: record without _id") from exc
        title = (rec.get("title") or "").strip()
        text = rec.get("text") or ""
        corpus[cid] = f"{title} {text}" if title else text
    queries = {}
    for rec in _read_jsonl(directory / "queries.jsonl"):
        try:
            queries[str(rec["_id"])] = rec.get("text") or ""
        except KeyError as exc:
            raise IngestionError(f"{directory / 'queries.jsonl'}: record without _id") from exc

    qrels_dir = directory / "qrels"
    test_path = qrels_dir / "test.tsv"
    if not test_path.exists():
        raise IngestionError(f"missing file: {test_path}")
    sources = []
    if train_split is None:
        if (qrels_dir / "train.tsv").exists():
            sources.append(("train", qrels_dir / "train.tsv"))
            if (qrels_dir / "dev.tsv").exists():
                sources.append(("dev", qrels_dir / "dev.tsv"))
    elif train_split in ("train", "dev"):
        path = qrels_dir / f"{train_split}.tsv"
        if not path.exists():
            raise IngestionError(f"missing file: {path}")
        sources.append(("train", path))
    else:
        raise IngestionError(f"train_split must be 'train' or 'dev', got {train_split!r}")
    sources.append(("test", test_path))

    pairs, partition, dropped, dangling = [], {}, 0, []
    for part, path in sources:
        for q, c, score in _read_qrels(path):
            if score <= 0:
                dropped += 1
                continue
            if q not in queries or c not in corpus:
                dangling.append(f"{path.name}:{q}->{c}")
                continue
            prev = partition.setdefault(q, part)
            if prev != part:
                raise IngestionError(f"query {q} appears in both {prev} and {part} qrels")
            pairs.append((q, c, score))
    if dangling:
        raise ReferentialIntegrityError(
            f"{len(dangling)} qrels rows reference unknown ids: {dangling[:10]}", dangling
        )
    if dropped:
        logger.info("%s: dropped %d zero-score qrels rows", name, dropped)
    return RetrievalDataset(name, corpus, queries, pairs, partition, FULL_CORPUS)


# --------------------------------------------------------------------------
# pair files


def _text_id(prefix, text):
    return prefix + hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_pairs(path, name=None):
    """Load ``{"query", "target", "split"}`` JSON lines.

    Identical targets (after whitespace normalisation) become one corpus
    element, so a query can collect several positives and a target can serve
    several queries. Retrieval for each split is restricted to that split's
    targets.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing file: {path}")
    name = name or path.stem
    corpus, queries, partition = {}, {}, {}
    pairs = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                query, target, split = rec["query"], rec["target"], rec["split"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IngestionError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if not all(isinstance(x, str) for x in (query, target, split)):
                raise IngestionError(f"{path}:{lineno}: query, target and split must be strings")
            if split not in PARTITIONS:
                raise IngestionError(f"{path}:{lineno}: unknown split {split!r}")
            nq, nt = normalize_text(query), normalize_text(target)
            if not nq or not nt:
                raise IngestionError(f"{path}:{lineno}: empty query or target")
            cid = _text_id("c", nt)
            qid = _text_id("q", f"{split}\x00{nq}")
            corpus.setdefault(cid, target)
            queries.setdefault(qid, query)
            partition[qid] = split
            pairs.add((qid, cid, 1))
    if not pairs:
        raise IngestionError(f"{path}: no records")
    return RetrievalDataset(name, corpus, queries, sorted(pairs), partition, PARTITION_CORPUS)


# --------------------------------------------------------------------------
# splitting


@dataclasses.dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    unit: str = "by_query"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise SplitError("train_fraction must lie strictly between 0 and 1")
        if self.unit != "by_query":
            raise SplitError(f"unsupported split unit {self.unit!r}")


def split(ds, spec):
    """Shuffle query ids with a seeded RNG; the first ``floor(f * n)`` go to train."""
    parts = ds.partitions()
    if len(parts) != 1:
        raise SplitError(f"split needs a single partition, dataset has {parts}")
    qids = ds.query_ids()
    n = len(qids)
    n_train = int(math.floor(spec.train_fraction * n + 1e-9))
    if n_train == 0 or n_train == n:
        raise SplitError(f"train_fraction {spec.train_fraction} on {n} queries leaves a side empty")
    perm = np.random.default_rng(spec.seed).permutation(n)
    partition = {qids[i]: ("train" if rank < n_train else "test") for rank, i in enumerate(perm)}
    return RetrievalDataset(
        ds.name, dict(ds.corpus), dict(ds.queries), list(ds.pairs), partition, ds.eval_corpus_scope
    )
