import json

import pytest
import yaml

from adapted_retrieval import adapter, cli, synthetic
from adapted_retrieval.errors import TrainingDivergenceError


def write_config(tmp_path, **overrides):
    doc = {
        "seed": 0,
        "dataset": {"format": "synthetic"},
        "provider": {"kind": "stub", "dimension": 64, "stub": {"mode": "offset"}},
        "train": {"h": 16, "max_epochs": 60},
        "eval": {"out": "out"},
    }
    for key, value in overrides.items():
        doc[key] = {**doc.get(key, {}), **value} if isinstance(value, dict) else value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


class TestEmbed:
    def test_counts_and_warm_cache(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["embed", "--config", str(cfg)]) == 0
        first = json.loads(capsys.readouterr().out)
        ds, _ = synthetic.make_offset_fixture(d=64, seed=0)
        assert first["texts"] == len(ds.corpus) + len(ds.queries)
        assert first["misses"] == first["texts"] and first["hits"] == 0
        assert cli.main(["embed", "--config", str(cfg)]) == 0
        second = json.loads(capsys.readouterr().out)
        assert second["hits"] == second["texts"] and second["misses"] == 0 and second["network_calls"] == 0


class TestTrainEval:
    def test_train_writes_checkpoint_and_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["train", "--config", str(cfg)]) == 0
        assert "best validation ndcg_at_10" in capsys.readouterr().out
        ckpt = tmp_path / "out" / "checkpoints" / "adr" / "query_adapter.json"
        report = json.loads((tmp_path / "out" / "train_report_adr.json").read_text())
        losses = report["loss_history"]
        assert len(losses) == 60 and losses[-1] < losses[0]
        assert adapter.load_metadata(ckpt)["mode"] == "adr"

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, train={"mode": "adr_full", "max_epochs": 20})
        out = tmp_path / "out" / "checkpoints" / "adr_full"
        assert cli.main(["train", "--config", str(cfg)]) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert cli.main(["train", "--config", str(cfg)]) == 0
        assert {p.name: p.read_bytes() for p in out.iterdir()} == first
        assert set(first) == {"query_adapter.json", "corpus_adapter.json"}

    def test_zero_epochs_identity_row_equals_baseline(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"max_epochs": 0})
        assert cli.main(["train", "--config", str(cfg)]) == 0
        ckpt = tmp_path / "out" / "checkpoints" / "adr"
        assert adapter.load(ckpt / "query_adapter.json").is_identity()
        assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        base, adr = report["systems"]
        assert base["name"] == "baseline" and adr["name"] == "adr"
        assert base["ndcg"] == adr["ndcg"] and base["per_query"] == adr["per_query"]

    def test_baseline_only_eval(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["eval", "--config", str(cfg)]) == 0
        text = (tmp_path / "out" / "report.txt").read_text()
        assert text.startswith("dataset: synthetic-offset") and "baseline" in text
        assert text.rstrip("\n") in capsys.readouterr().out

    def test_sweep_grid(self, tmp_path):
        cfg = write_config(tmp_path, train={"max_epochs": 5, "hidden_sizes": [8, 16]})
        assert cli.main(["train", "--config", str(cfg)]) == 0
        sweep = json.loads((tmp_path / "out" / "sweep_report_adr.json").read_text())
        assert [c["config"]["h"] for c in sweep["cells"]] == [8, 16]


class TestRun:
    def test_end_to_end_and_manifest(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"max_epochs": 500})
        assert cli.main(["run", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "adr" in out and "manifest written" in out
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        base, adr = report["systems"]
        assert base["ndcg"]["1"] <= 0.30 and adr["ndcg"]["1"] >= 0.95
        assert set(manifest["artifacts"]) == {"checkpoints/adr/query_adapter.json", "report.json", "report.txt"}
        assert manifest["seeds"]["global"] == 0

        assert cli.main(["run", "--config", str(cfg)]) == 0
        again = json.loads((tmp_path / "out" / "manifest.json").read_text())
        for key in ("config_hash", "dataset_hash", "artifacts", "seeds"):
            assert again[key] == manifest[key]
        assert again["embedding"]["network_calls"] == 0

    def test_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path, train={"max_epochs": 3})
        other = tmp_path / "elsewhere"
        assert cli.main(["run", "--config", str(cfg), "--mode", "adr_full", "--seed", "5", "--out", str(other)]) == 0
        manifest = json.loads((other / "manifest.json").read_text())
        assert manifest["seeds"]["global"] == 5
        assert "checkpoints/adr_full/corpus_adapter.json" in manifest["artifacts"]
        base = json.loads((other / "train_report_adr_full.json").read_text())
        assert base["config"]["seed"] == 5 and base["config"]["mode"] == "adr_full"

    def test_pairs_dataset(self, tmp_path):
        rows = [{"query": f"[nl] w{i} w{i + 1} w{i + 2}", "target": f"w{i} w{i + 1} w{i + 2} w{i + 3}",
                 "split": "train" if i < 30 else "test"} for i in range(40)]
        (tmp_path / "pairs.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
        cfg = write_config(tmp_path, dataset={"format": "pairs", "path": "pairs.jsonl"},
                           train={"max_epochs": 3, "h": 4}, provider={"dimension": 16})
        assert cli.main(["run", "--config", str(cfg)]) == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["counts"]["test_queries"] == 10


class TestExitCodes:
    def test_usage_error_is_one(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            cli.main(["train"])
        assert err.value.code == 1
        with pytest.raises(SystemExit) as err:
            cli.main(["train", "--config", "x", "--mode", "nope"])
        assert err.value.code == 1

    def test_config_error_is_one(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("dataset: {format: synthetic}\ntrian: {}\n")
        assert cli.main(["embed", "--config", str(path)]) == 1
        assert "trian" in capsys.readouterr().err

    def test_missing_checkpoint_is_one(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "none")]) == 1
        assert "missing checkpoint" in capsys.readouterr().err

    def test_dimension_mismatched_checkpoint_is_one(self, tmp_path):
        small = write_config(tmp_path, provider={"dimension": 32}, train={"max_epochs": 0})
        assert cli.main(["train", "--config", str(small)]) == 0
        ckpt = tmp_path / "out" / "checkpoints" / "adr"
        big = write_config(tmp_path)
        assert cli.main(["eval", "--config", str(big), "--checkpoint", str(ckpt)]) == 1

    def test_provider_error_is_two(self, tmp_path, capsys):
        cfg = write_config(tmp_path, provider={"kind": "remote", "endpoint_url": "http://127.0.0.1:9/v1/embeddings",
                                               "max_retries": 0, "timeout": 2.0})
        assert cli.main(["embed", "--config", str(cfg)]) == 2
        assert "request" in capsys.readouterr().err

    def test_divergence_is_three(self, tmp_path, monkeypatch, capsys):
        def diverge(*_, **__):
            raise TrainingDivergenceError("loss exploded", diagnostics={"epoch": 1})

        monkeypatch.setattr("adapted_retrieval.trainer.train_epoch", diverge)
        cfg = write_config(tmp_path)
        assert cli.main(["train", "--config", str(cfg)]) == 3
        assert "loss exploded" in capsys.readouterr().err
        assert not (tmp_path / "out" / "checkpoints").exists()

    def test_ingestion_error_is_one(self, tmp_path):
        cfg = write_config(tmp_path, dataset={"format": "beir", "path": "missing"})
        assert cli.main(["embed", "--config", str(cfg)]) == 1
