import json

import pytest

from adapted_retrieval import datasets
from adapted_retrieval.datasets import FULL_CORPUS, PARTITION_CORPUS, RetrievalDataset, SplitSpec
from adapted_retrieval.errors import IngestionError, ReferentialIntegrityError, SplitError


def write_beir(root, corpus, queries, qrels):
    root.mkdir(parents=True, exist_ok=True)
    (root / "corpus.jsonl").write_text("".join(json.dumps(r) + "\n" for r in corpus))
    (root / "queries.jsonl").write_text("".join(json.dumps(r) + "\n" for r in queries))
    (root / "qrels").mkdir(exist_ok=True)
    for split, rows in qrels.items():
        body = "query-id\tcorpus-id\tscore\n" + "".join(f"{q}\t{c}\t{s}\n" for q, c, s in rows)
        (root / "qrels" / f"{split}.tsv").write_text(body)
    return root


@pytest.fixture
def beir_dir(tmp_path):
    corpus = [
        {"_id": "d1", "title": "Vitamin D", "text": "reduces fractures."},
        {"_id": "d2", "title": "", "text": "Unrelated abstract."},
        {"_id": "d3", "title": "Zinc", "text": "and colds."},
    ]
    queries = [{"_id": "q1", "text": "does vitamin d help"}, {"_id": "q2", "text": "zinc colds"},
               {"_id": "q3", "text": "dev query"}]
    qrels = {"train": [("q1", "d1", 1), ("q1", "d2", 0)], "dev": [("q3", "d2", 2)], "test": [("q2", "d3", 1)]}
    return write_beir(tmp_path / "mini", corpus, queries, qrels)


def write_pairs(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


class TestBeir:
    def test_minimal(self, tmp_path):
        root = write_beir(tmp_path / "m", [{"_id": "a", "title": "", "text": "x"}, {"_id": "b", "text": "y"}],
                          [{"_id": "q", "text": "x?"}], {"test": [("q", "a", 1)]})
        ds = datasets.load_beir(root)
        assert ds.pairs == [("q", "a", 1)] and ds.partition == {"q": "test"}
        assert ds.eval_corpus_scope == FULL_CORPUS

    def test_fields_and_zero_scores(self, beir_dir):
        ds = datasets.load_beir(beir_dir)
        assert ds.corpus["d1"] == "Vitamin D reduces fractures."
        assert ds.corpus["d2"] == "Unrelated abstract."
        assert ("q1", "d2", 0) not in ds.pairs
        assert ds.positives("q1") == {"d1"}
        assert ds.partition == {"q1": "train", "q3": "dev", "q2": "test"}

    def test_dev_as_train(self, beir_dir):
        ds = datasets.load_beir(beir_dir, train_split="dev")
        assert ds.query_ids("train") == ["q3"] and ds.query_ids("test") == ["q2"]

    def test_positive_negative_partition(self, beir_dir):
        ds = datasets.load_beir(beir_dir)
        for q in ds.query_ids():
            pos, neg = ds.positives(q), ds.negatives(q)
            assert not pos & neg and pos | neg == set(ds.corpus)

    def test_missing_file_named(self, beir_dir):
        (beir_dir / "qrels" / "test.tsv").unlink()
        with pytest.raises(IngestionError, match="test.tsv"):
            datasets.load_beir(beir_dir)

    def test_dangling_ids_listed(self, tmp_path):
        root = write_beir(tmp_path / "m", [{"_id": "a", "text": "x"}], [{"_id": "q", "text": "x"}],
                          {"test": [("q", "a", 1), ("q", "zz", 1), ("nope", "a", 1)]})
        with pytest.raises(ReferentialIntegrityError) as err:
            datasets.load_beir(root)
        assert len(err.value.offenders) == 2
        assert any("zz" in o for o in err.value.offenders)

    def test_bad_json_line(self, beir_dir):
        (beir_dir / "queries.jsonl").write_text('{"_id": "q1", "text": "a"}\n{oops\n')
        with pytest.raises(IngestionError, match=":2:"):
            datasets.load_beir(beir_dir)


class TestPairs:
    def test_duplicate_targets_merge(self, tmp_path):
        path = write_pairs(tmp_path / "p.jsonl", [
            {"query": "create meeting", "target": "(Create (Event))", "split": "train"},
            {"query": "book a meeting", "target": "(Create  (Event))", "split": "train"},
        ])
        ds = datasets.load_pairs(path, "p")
        assert len(ds.corpus) == 1 and len(ds.pairs) == 2
        assert ds.eval_corpus_scope == PARTITION_CORPUS

    def test_one_query_many_targets(self, tmp_path):
        path = write_pairs(tmp_path / "p.jsonl", [
            {"query": "sort list", "target": "sorted(x)", "split": "train"},
            {"query": "sort list", "target": "x.sort()", "split": "train"},
        ])
        ds = datasets.load_pairs(path)
        (q,) = ds.query_ids()
        assert len(ds.positives(q)) == 2

    def test_per_split_corpora(self, tmp_path):
        path = write_pairs(tmp_path / "smcal.jsonl", [
            {"query": "what is on my calendar", "target": "(FindEventWrapper (Today))", "split": "train"},
            {"query": "cancel lunch", "target": "(DeleteEvent (Lunch))", "split": "train"},
            {"query": "who is at the offsite", "target": "(FindAttendees (Offsite))", "split": "test"},
        ])
        ds = datasets.load_pairs(path)
        assert len(ds.corpus_ids("train")) == 2 and len(ds.corpus_ids("test")) == 1
        assert len(ds.corpus_ids()) == 3

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text(json.dumps({"query": "a", "target": "b", "split": "train"}) + "\n{\"query\": 1}\n")
        with pytest.raises(IngestionError, match=":2:"):
            datasets.load_pairs(path)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        with pytest.raises(IngestionError):
            datasets.load_pairs(tmp_path / "e.jsonl")

    def test_unknown_split(self, tmp_path):
        path = write_pairs(tmp_path / "p.jsonl", [{"query": "a", "target": "b", "split": "val"}])
        with pytest.raises(IngestionError):
            datasets.load_pairs(path)


def single_partition(n):
    return RetrievalDataset(
        "s", {f"c{i}": f"doc {i}" for i in range(n)}, {f"q{i}": f"query {i}" for i in range(n)},
        [(f"q{i}", f"c{i}", 1) for i in range(n)], {f"q{i}": "test" for i in range(n)},
    )


class TestSplit:
    def test_arguana_counts(self):
        counts = datasets.split(single_partition(1406), SplitSpec(0.8, seed=0)).counts()
        assert counts["train_queries"] == 1124 and counts["test_queries"] == 282

    def test_half_of_two(self):
        ds = datasets.split(single_partition(2), SplitSpec(0.5, seed=3))
        assert len(ds.query_ids("train")) == 1 and len(ds.query_ids("test")) == 1

    def test_deterministic_and_seed_sensitive(self):
        base = single_partition(50)
        a = datasets.split(base, SplitSpec(0.8, seed=1))
        b = datasets.split(base, SplitSpec(0.8, seed=1))
        c = datasets.split(base, SplitSpec(0.8, seed=2))
        assert a.partition == b.partition and a.partition != c.partition

    def test_is_partition_and_pairs_follow(self):
        ds = datasets.split(single_partition(30), SplitSpec(0.7, seed=0))
        train, test = set(ds.query_ids("train")), set(ds.query_ids("test"))
        assert not train & test and train | test == set(ds.queries)
        assert {q for q, _, _ in ds.pairs_in("train")} == train

    def test_empty_side(self):
        with pytest.raises(SplitError):
            datasets.split(single_partition(2), SplitSpec(0.2))
        with pytest.raises(SplitError):
            SplitSpec(1.0)

    def test_requires_single_partition(self, beir_dir):
        with pytest.raises(SplitError):
            datasets.split(datasets.load_beir(beir_dir), SplitSpec())


class TestDatasetValue:
    def test_roundtrip(self, beir_dir, tmp_path):
        ds = datasets.load_beir(beir_dir)
        datasets.save(ds, tmp_path / "ds.json")
        again = datasets.load(tmp_path / "ds.json")
        assert again == ds and again.content_hash() == ds.content_hash()

    def test_integrity_checked_on_construction(self):
        with pytest.raises(ReferentialIntegrityError):
            RetrievalDataset("x", {"c": "t"}, {"q": "t"}, [("q", "missing", 1)], {"q": "test"})

    def test_counts_report_pairs_and_queries(self, beir_dir):
        counts = datasets.load_beir(beir_dir).counts()
        assert counts["train_queries"] == 1 and counts["train_pairs"] == 1
