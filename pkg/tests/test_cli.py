import json
import logging

import pytest

from metasep.cli import main
from metasep.corpus import load_corpus
from metasep.errors import ConfigError
from metasep.experiment import ExperimentConfig, build_corpus, build_tasks, substream_seed
from metasep.tasks import read_task_manifest


def small_config(**train):
    spec = {"num_domains": 2, "speakers_per_domain": 3, "utterance_len_s": 0.5}
    return {
        "seed": 5,
        "corpus": {"synth": [
            {"role": "source", "collapse_to": "src", "spec": {**spec, "label_prefix": "src"}},
            {"role": "target", "spec": {**spec, "domain_shift": 0.5, "label_prefix": "tgt"}},
        ]},
        "tasks": {"train_tasks": 6, "val_tasks": 2, "target_tasks_per_domain": 2},
        "model": {"window_len": 32, "hop_len": 16, "basis_dim": 8, "separator_hidden": 8, "separator_layers": 1},
        "train": {"epochs": 2, "meta_batch": 2, **train},
        "eval": {"alpha": 0.01},
    }


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config()))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_config_round_trip_and_substreams(tmp_path):
    cfg = ExperimentConfig.from_dict(small_config())
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back.dumps() == cfg.dumps()
    assert back.model_config() == cfg.model_config()
    assert substream_seed(5, "train") == substream_seed(5, "train") != substream_seed(5, "model")
    assert substream_seed(5, "train") != substream_seed(6, "train")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**small_config(), "bogus": {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**small_config(), "tasks": {"num_sources": 4}})


def test_synth_is_deterministic_and_loads_cleanly(tmp_path, cfg_path, caplog):
    assert run("synth", "--config", cfg_path, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", cfg_path, "--out", tmp_path / "b") == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    with caplog.at_level(logging.WARNING):
        corpus = load_corpus(tmp_path / "a" / "manifest.csv")
    assert not [r for r in caplog.records if r.levelno >= logging.WARNING]
    assert len(corpus.utterances) == 2 * 2 * 3 * 3


def test_tasks_manifests_rebuild(tmp_path, cfg_path):
    assert run("tasks", "--config", cfg_path, "--out", tmp_path) == 0
    cfg = ExperimentConfig.load(tmp_path / "config.json")
    exp = build_corpus(cfg)
    train, _, target = build_tasks(cfg, exp)
    rebuilt = read_task_manifest(tmp_path / "tasks_train.jsonl", exp.corpus)
    assert [t.task_id for t in rebuilt] == [t.task_id for t in train]
    assert len(read_task_manifest(tmp_path / "tasks_target.jsonl", exp.corpus)) == len(target) == 4


def test_invalid_inputs_exit_two(tmp_path, cfg_path, capsys):
    bad = small_config()
    bad["corpus"]["synth"][0]["spec"]["domain_shift"] = 3.0
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert run("synth", "--config", tmp_path / "bad.json", "--out", tmp_path / "x") == 2
    assert run("train", "--config", cfg_path, "--out", tmp_path / "t", "--method", "reptile") == 2
    assert run("bench", "--config", cfg_path, "--out", tmp_path / "b", "--iterations", "0") == 2
    assert run("train", "--config", cfg_path, "--out", tmp_path / "r", "--resume") == 2
    assert run("train", "--config", cfg_path, "--out", tmp_path / "w", "--workers", "0") == 2
    assert "error" in capsys.readouterr().err


def test_train_is_bit_exact_across_workers_and_resumable(tmp_path, cfg_path):
    for workers, out in ((1, "w1"), (3, "w3")):
        assert run("train", "--config", cfg_path, "--out", tmp_path / out, "--workers", workers) == 0
    for name in ("checkpoint.json", "state.json", "config.json"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_ms"}
                       for l in p.read_text().splitlines()]
    assert strip(tmp_path / "w1" / "train_log.jsonl") == strip(tmp_path / "w3" / "train_log.jsonl")

    # one epoch, then resume for the second, matches two epochs straight through
    assert run("train", "--config", cfg_path, "--out", tmp_path / "r", "--epochs", 1, "--workers", 1) == 0
    assert run("train", "--config", tmp_path / "r" / "config.json", "--out", tmp_path / "r",
               "--epochs", 2, "--resume", "--workers", 1) == 0
    full = json.loads((tmp_path / "w1" / "state.json").read_text())
    resumed = json.loads((tmp_path / "r" / "state.json").read_text())
    assert resumed == full


def test_eval_diff_and_bench(tmp_path, cfg_path, capsys):
    assert run("train", "--config", cfg_path, "--out", tmp_path / "m", "--workers", 1) == 0
    ckpt = tmp_path / "m" / "checkpoint.json"
    ratings = tmp_path / "ratings.csv"
    ratings.write_text("domain_label,rating\ntgt0,6\ntgt1,2\n")
    assert run("eval", "--config", cfg_path, "--out", tmp_path / "e1", "--checkpoint", ckpt,
               "--no-adapt", "--workers", 1) == 0
    assert run("eval", "--config", cfg_path, "--out", tmp_path / "e2", "--checkpoint", ckpt, "--adapt",
               "--alpha", 0.02, "--noise-snr", 10, "--ratings", ratings, "--workers", 2) == 0
    r1 = json.loads((tmp_path / "e1" / "report.json").read_text())
    r2 = json.loads((tmp_path / "e2" / "report.json").read_text())
    assert r1["settings"]["finetuned"] is False and r1["settings"]["noisy"] is False
    assert r2["settings"]["finetuned"] is True and r2["settings"]["alpha"] == 0.02
    assert r2["settings"]["noise_snr_db"] == 10.0 and r2["correlation"] is not None
    assert 0 <= r2["extra"]["degraded_tasks"] <= len(r2["per_task"]) == 4
    assert (tmp_path / "e2" / "report_unadapted.json").exists()

    assert run("diff", tmp_path / "e1" / "report.json", tmp_path / "e2" / "report.json",
               "--out", tmp_path / "delta.json") == 0
    rows = json.loads((tmp_path / "delta.json").read_text())
    assert [r["domain_label"] for r in rows] == ["tgt0", "tgt1", "overall"]
    assert rows[-1]["delta"] == pytest.approx(r2["overall"] - r1["overall"])

    other = small_config()
    other["model"]["basis_dim"] = 12
    (tmp_path / "other.json").write_text(json.dumps(other))
    assert run("eval", "--config", tmp_path / "other.json", "--out", tmp_path / "e3", "--checkpoint", ckpt) == 2

    assert run("bench", "--config", cfg_path, "--out", tmp_path / "b", "--iterations", 2) == 0
    bench = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert bench["maml_over_fomaml"] > 0 and set(bench["timings"]) == {"maml", "fomaml"}
    assert "maml/fomaml time ratio" in capsys.readouterr().out
