"""Command-line interface, end to end on a small corpus."""

import csv
import hashlib
import json

import pytest

from ebrkit.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from ebrkit.trainer import load_checkpoint

from conftest import SMALL

TRAIN_FLAGS = ["--hidden-dim", "16", "--truncate", "20", "--max-steps", "6", "--checkpoint-every", "2"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "gen.json"
    cfg.write_text(json.dumps({"data": SMALL}))
    small_train = root / "run.json"
    small_train.write_text(json.dumps({"train": {"per_shard_batch_size": 2, "num_shards": 2}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "1"]) == EXIT_OK
    assert main(["train", "--config", str(small_train), "--corpus", str(root / "data"), "--out", str(root / "run"),
                 *TRAIN_FLAGS]) == EXIT_OK
    return root


def _summary(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        code = main(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")])
        assert code == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_missing_required_arg(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train"])
        assert info.value.code == EXIT_USAGE

    def test_invalid_config_value(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"engagement_rate": 3.0}))
        assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION

    def test_bad_windows(self, tmp_path):
        assert main(["simulate", "--demo", "--out", str(tmp_path), "--windows", "item_created"]) == EXIT_USAGE


class TestGenData:
    def test_checksums_stable(self, workdir, tmp_path):
        cfg = workdir / "gen.json"
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "1"]) == EXIT_OK
        for f in sorted((workdir / "data" / "corpus").iterdir()):
            assert sha(f) == sha(tmp_path / "again" / "corpus" / f.name)
        assert sha(workdir / "data" / "truth" / "latent.bin") == sha(tmp_path / "again" / "truth" / "latent.bin")
        manifest = json.loads((tmp_path / "again" / "manifest.json").read_text())
        assert manifest["command"] == "gen-data" and manifest["seed"] == 1 and not manifest["rerun"]

    def test_rerun_flagged(self, workdir, tmp_path):
        args = ["gen-data", "--config", str(workdir / "gen.json"), "--out", str(tmp_path / "r")]
        main(args)
        main(args)
        assert json.loads((tmp_path / "r" / "manifest.json").read_text())["rerun"]


class TestTrain:
    def test_outputs(self, workdir):
        run = workdir / "run"
        for name in ("checkpoint.bin", "metrics.jsonl", "vocab.txt", "run_config.json", "manifest.json"):
            assert (run / name).exists()
        _, meta, _ = load_checkpoint(run / "checkpoint.bin")
        assert meta["step"] == 6 and meta["run_config"]["model"]["hidden_dim"] == 16

    def test_epochs_zero_is_init(self, workdir, tmp_path):
        assert main(["train", "--corpus", str(workdir / "data"), "--out", str(tmp_path / "z"),
                     "--hidden-dim", "16", "--epochs", "0"]) == EXIT_OK
        from ebrkit.encoder import init_params
        model, meta, _ = load_checkpoint(tmp_path / "z" / "checkpoint.bin")
        fresh = init_params(model.config)
        for (_, p), (_, q) in zip(model.named_tensors(), fresh.named_tensors()):
            assert (p == q).all()
        assert meta["step"] == 0

    def test_history_mode_ablation(self, workdir, tmp_path):
        for mode in ("positive_only", "all"):
            assert main(["train", "--config", str(workdir / "run.json"), "--corpus", str(workdir / "data"),
                         "--out", str(tmp_path / mode), *TRAIN_FLAGS, "--history-mode", mode]) == EXIT_OK
        cfgs = [json.loads((tmp_path / m / "run_config.json").read_text()) for m in ("positive_only", "all")]
        assert [c["prompts"]["history_mode"] for c in cfgs] == ["positive_only", "all"]
        assert (tmp_path / "positive_only" / "metrics.jsonl").read_text() != (tmp_path / "all" / "metrics.jsonl").read_text()

    def test_kill_and_resume(self, workdir, tmp_path):
        base = ["train", "--config", str(workdir / "run.json"), "--corpus", str(workdir / "data"), *TRAIN_FLAGS]
        assert main([*base, "--out", str(tmp_path / "r"), "--stop-after", "3"]) == EXIT_OK
        assert load_checkpoint(tmp_path / "r" / "checkpoint.bin")[1]["step"] == 2
        assert main([*base, "--out", str(tmp_path / "r"), "--resume"]) == EXIT_OK
        assert sha(tmp_path / "r" / "checkpoint.bin") == sha(workdir / "run" / "checkpoint.bin")
        assert sha(tmp_path / "r" / "metrics.jsonl") == sha(workdir / "run" / "metrics.jsonl")

    def test_resume_without_checkpoint(self, workdir, tmp_path):
        code = main(["train", "--corpus", str(workdir / "data"), "--out", str(tmp_path / "n"), "--resume", *TRAIN_FLAGS])
        assert code == EXIT_VALIDATION


class TestEval:
    def test_oracle_full_recall(self, workdir, tmp_path):
        assert main(["eval", "--corpus", str(workdir / "data"), "--out", str(tmp_path),
                     "--retriever", "oracle", "--n", "5", "--k", "5"]) == EXIT_OK
        (row,) = _summary(tmp_path / "summary.csv")
        assert float(row["recall_mean"]) == 1.0

    def test_mrl_sweep_rows(self, workdir, tmp_path):
        assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--corpus", str(workdir / "data"),
                     "--out", str(tmp_path), "--mrl-sweep"]) == EXIT_OK
        rows = _summary(tmp_path / "summary.csv")
        assert [int(r["dim"]) for r in rows] == [8, 16]
        assert list(rows[0]) == ["dim", "n", "k", "members", "skipped", "recall_mean", "recall_std", "popularity_corr"]

    def test_model_requires_checkpoint(self, workdir, tmp_path):
        assert main(["eval", "--corpus", str(workdir / "data"), "--out", str(tmp_path)]) == EXIT_USAGE


class TestIndex:
    def test_snapshot_and_queries(self, workdir, tmp_path):
        member = json.loads((workdir / "data" / "corpus" / "members.jsonl").read_text().splitlines()[0])["member_id"]
        assert main(["index", "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--corpus", str(workdir / "data"),
                     "--out", str(tmp_path), "--query", member, "--k", "3"]) == EXIT_OK
        assert (tmp_path / "index.bin").exists()
        (trace,) = [json.loads(line) for line in (tmp_path / "queries.jsonl").read_text().splitlines()]
        assert trace["member_id"] == member and len(trace["results"]) <= 3

    def test_unknown_member(self, workdir, tmp_path):
        assert main(["index", "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--corpus", str(workdir / "data"),
                     "--out", str(tmp_path), "--query", "ghost"]) == EXIT_VALIDATION


class TestSimulate:
    def test_demo(self, tmp_path):
        assert main(["simulate", "--demo", "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "freshness.csv").exists() and (tmp_path / "traces.jsonl").exists()

    def test_empty_scenario(self, tmp_path):
        (tmp_path / "s.json").write_text("{}")
        assert main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == EXIT_OK
        rows = _summary(tmp_path / "o" / "freshness.csv")
        assert all(r["count"] == "0" for r in rows)

    def test_failed_expectation(self, tmp_path):
        spec = {"events": [{"event_time": 0, "kind": "item_created", "subject_id": "x",
                            "payload": {"body_text": "b", "author_id": "a"}}],
                "expect": {"max_lag": {"item_created": 1}}}
        (tmp_path / "s.json").write_text(json.dumps(spec))
        assert main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME

    def test_windows_override(self, tmp_path):
        spec = {"random_stream": {"n_events": 300, "seed": 1}}
        (tmp_path / "s.json").write_text(json.dumps(spec))
        main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / "a")])
        main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / "b"), "--windows", "item_created=10"])
        lag = {d: {r["event_class"]: r for r in _summary(tmp_path / d / "freshness.csv")} for d in ("a", "b")}
        assert float(lag["b"]["item_created"]["max_lag_s"]) <= 10 < float(lag["a"]["item_created"]["max_lag_s"])
        assert lag["a"]["member_interaction"] == lag["b"]["member_interaction"]

    def test_with_checkpoint_and_deterministic(self, workdir, tmp_path):
        spec = {"random_stream": {"n_events": 200, "seed": 3}, "queries": [{"time": 300, "member_id": "m00002"}]}
        (tmp_path / "s.json").write_text(json.dumps(spec))
        for d in ("a", "b"):
            assert main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / d),
                         "--checkpoint", str(workdir / "run" / "checkpoint.bin")]) == EXIT_OK
        for name in ("freshness.csv", "traces.jsonl"):
            assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
