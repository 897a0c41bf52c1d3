import csv
import json

import pytest

from cmr.cli import main
from cmr.pipeline import ExperimentConfig

SMALL = {
    "synthetic": {"num_types": 3, "entities_per_type": 10, "groups_per_type": 2, "num_relations": 3,
                  "visual_dim": 8, "unseen_fraction": 0.3},
    "featurizer": {"hash_dim": 32},
    "hyper": {"embed_dim": 8, "prefix_len": 2, "desc_tokens": 2, "hidden": 16},
    "train": {"batch_size": 16, "max_epochs": 3},
    "k_grid": [1, 4],
    "lam_grid": [0.0, 0.5, 1.0],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(config, out, *cmd):
    return main(["--config", str(config), "--out", str(out), *cmd])


@pytest.fixture
def pipeline(tmp_path, config):
    out = tmp_path / "run"
    for cmd in ("gen-synthetic", "featurize", "train", "memorize", "sweep", "eval"):
        assert run(config, out, cmd) == 0, cmd
    return out


def test_full_pipeline_artifacts(pipeline):
    metrics = json.loads((pipeline / "eval" / "metrics.json").read_text())
    assert set(metrics["metrics"]) == {"full", "es_only", "ks_only"}
    assert metrics["seed"] == 0
    assert 0 <= metrics["metrics"]["full"]["mrr"] <= 1
    table = (pipeline / "eval" / "metrics.txt").read_text().splitlines()
    assert table[0].split() == ["MRR", "Hits@1", "Hits@3", "Hits@10"]


def test_sweep_writes_grid_and_choice(pipeline):
    rows = list(csv.reader((pipeline / "sweep" / "grid.csv").open()))
    assert rows[0] == ["k", "lambda", "MRR", "Hits@1", "Hits@3", "Hits@10"]
    assert len(rows) == 1 + 2 * 3
    best = json.loads((pipeline / "sweep" / "best.json").read_text())
    assert best["k"] in (1, 4) and best["lam"] in (0.0, 0.5, 1.0)
    metrics = json.loads((pipeline / "eval" / "metrics.json").read_text())
    assert (metrics["k"], metrics["lam"]) == (best["k"], best["lam"])


def test_history_csv(pipeline):
    rows = list(csv.DictReader((pipeline / "model" / "history.csv").open()))
    assert list(rows[0]) == ["epoch", "L_FC", "L_AC", "L_FC_rev", "L_AC_rev", "valid_Hits@1", "valid_MRR"]
    assert [int(r["epoch"]) for r in rows] == list(range(1, len(rows) + 1))


def test_manifests_chain_upstream_hashes(pipeline):
    train = json.loads((pipeline / "manifests" / "train.json").read_text())
    memorize = json.loads((pipeline / "manifests" / "memorize.json").read_text())
    ckpt = str(pipeline / "model" / "params.cmrp")
    assert memorize["inputs"][ckpt] == train["outputs"][ckpt]
    for m in (train, memorize):
        assert m["seed"] == 0 and len(m["config_hash"]) == 64 and m["elapsed_s"] >= 0
    assert train["config_hash"] == ExperimentConfig.from_dict(SMALL).digest()


def test_infer_writes_ranked_tsv(pipeline, config, tmp_path):
    queries = tmp_path / "q.tsv"
    queries.write_text("e0000\tr0\ne0000\tr0^-1\n")
    assert run(config, pipeline, "infer", "--queries", str(queries), "--top", "3") == 0
    lines = (pipeline / "infer" / "predictions.tsv").read_text().splitlines()
    assert lines[0] == "head\trelation\trank\tentity\tprob"
    assert len(lines) == 1 + 2 * 3
    first = lines[1].split("\t")
    assert first[:3] == ["e0000", "r0", "1"]
    assert [line.split("\t")[1] for line in lines[4:]] == ["r0^-1"] * 3


def test_infer_rejects_unknown_names(pipeline, config, tmp_path, capsys):
    queries = tmp_path / "q.tsv"
    queries.write_text("nobody\tr0\n")
    assert run(config, pipeline, "infer", "--queries", str(queries)) == 1
    assert "nobody" in capsys.readouterr().err


def test_eval_before_memorize_names_store(tmp_path, config, capsys):
    out = tmp_path / "run"
    for cmd in ("gen-synthetic", "featurize", "train"):
        assert run(config, out, cmd) == 0
    assert run(config, out, "eval") == 2
    assert "ks.cmrs" in capsys.readouterr().err


def test_train_before_featurize(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert run(config, out, "gen-synthetic") == 0
    assert run(config, out, "train") == 2
    assert "entity_text.cmrf" in capsys.readouterr().err


def test_missing_dataset(tmp_path, config, capsys):
    assert run(config, tmp_path / "empty", "featurize") == 2
    assert "manifest.json" in capsys.readouterr().err


def test_bad_log_level(tmp_path, config, monkeypatch):
    monkeypatch.setenv("CMR_LOG_LEVEL", "loud")
    assert run(config, tmp_path, "gen-synthetic") == 1


def test_global_flags_after_subcommand(tmp_path, config):
    out = tmp_path / "late"
    assert main(["gen-synthetic", "--config", str(config), "--out", str(out), "--seed", "4"]) == 0
    manifest = json.loads((out / "manifests" / "gen-synthetic.json").read_text())
    assert manifest["seed"] == 4 and manifest["config"]["train"]["seed"] == 4


def test_seed_changes_data(tmp_path, config):
    run(config, tmp_path / "a", "gen-synthetic")
    main(["--config", str(config), "--out", str(tmp_path / "b"), "--seed", "1", "gen-synthetic"])
    assert (tmp_path / "a/data/train.tsv").read_text() != (tmp_path / "b/data/train.tsv").read_text()


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.digest() == cfg.digest()
    with pytest.raises(ValueError, match="bogus"):
        ExperimentConfig.from_dict({"bogus": 1})


def test_digest_ignores_output_location():
    cfg = ExperimentConfig()
    assert cfg.digest() == ExperimentConfig(out_dir="elsewhere").digest()
    assert cfg.digest() != cfg.with_seed(1).digest()
