import json
import shutil

import pytest
import yaml

from codex_ensemble.cli import main
from codex_ensemble.config import default_config_text, load_config, parse_config
from codex_ensemble.errors import SchemaViolation, UnknownModality, WorkDirLocked
from codex_ensemble.pipeline import work_lock

SMALL = {
    "schema_version": 1,
    "paths": {"corpus": "data/corpus.jsonl", "work_dir": "work"},
    "generator": {"n_episodes": 600, "n_categories": 10, "seed": 3},
    "features": {"dim_per_sentence": 16},
    "split": {"ratios": [0.7, 0.1, 0.2], "seed": 1},
    "models": {
        "hidden": {"lab": [16], "medications": [16], "radiology": [16, 16], "admission": [4]},
        "confidence_hidden": [8],
        "confidence_folds": 2,
        "train": {"max_epochs": 8, "batch_size": 128, "seed": 2},
    },
    "evaluation": {"ablations": [["medications"], ["medications", "lab"]]},
}


def write_config(directory, doc=SMALL):
    path = directory / "run.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def err_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d)
    for stage in ("synth", "prepare", "train", "evaluate", "scope-report", "predict"):
        assert main([stage, "--config", cfg]) == 0, stage
    return d, cfg


def test_full_pipeline_writes_artifacts(trained):
    d, cfg = trained
    reports = d / "work" / "reports"
    for name in ("synth_stats.json", "synth_stats.txt", "codes_per_case.png", "ingest.json", "ingest.txt",
                 "train.json", "loss_history.png", "evaluate.json", "evaluate.txt", "evaluate.png",
                 "scope.json", "scope.txt", "scope.png", "predict.json"):
        assert (reports / name).exists(), name
    h = load_config(cfg).hash
    ev = json.loads((reports / "evaluate.json").read_text())
    assert ev["config_hash"] == h
    assert {"ensemble", "combined", "averaging", "prior_rank", "bayes_oracle"} <= set(ev["models"])
    assert [r["subset"] for r in ev["ablation"]] == [["medications"], ["lab", "medications"]]
    preds = (d / "work" / "predictions.jsonl").read_text().splitlines()
    rec = json.loads(preds[0])
    assert set(rec) == {"episode_id", "top", "principal", "confidence", "decision"}
    assert len(preds) == 600
    assert (d / "data" / "corpus.tables.json").exists()
    assert not (d / "work" / ".lock").exists()


def test_rerun_is_byte_identical(trained, tmp_path):
    d, _ = trained
    cfg = write_config(tmp_path)
    for stage in ("synth", "prepare", "train", "evaluate"):
        assert main([stage, "--config", cfg]) == 0
    a = (d / "work" / "reports" / "evaluate.json").read_bytes()
    b = (tmp_path / "work" / "reports" / "evaluate.json").read_bytes()
    assert a == b
    assert (d / "data" / "corpus.jsonl").read_bytes() == (tmp_path / "data" / "corpus.jsonl").read_bytes()


def test_evaluate_before_train_is_dependency_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["evaluate", "--config", cfg]) != 0
    assert err_line(capsys).startswith("error: MissingArtifact:")
    assert main(["prepare", "--config", cfg]) != 0
    assert err_line(capsys).startswith("error: MissingArtifact:")


def test_config_change_is_hash_mismatch(trained, tmp_path, capsys):
    d, _ = trained
    shutil.copytree(d / "work", tmp_path / "work")
    shutil.copytree(d / "data", tmp_path / "data")
    doc = json.loads(json.dumps(SMALL))
    doc["models"]["train"]["seed"] = 99
    cfg = write_config(tmp_path, doc)
    assert main(["evaluate", "--config", cfg]) != 0
    assert err_line(capsys).startswith("error: ConfigHashMismatch:")


def test_only_flag_retrains_selected_parts(trained, tmp_path):
    d, _ = trained
    shutil.copytree(d / "work", tmp_path / "work")
    shutil.copytree(d / "data", tmp_path / "data")
    cfg = write_config(tmp_path)
    before = (tmp_path / "work" / "system" / "lab.nn").read_bytes()
    assert main(["train", "--config", cfg, "--only", "ensemble"]) == 0
    assert (tmp_path / "work" / "system" / "lab.nn").read_bytes() == before
    summary = json.loads((tmp_path / "work" / "reports" / "train.json").read_text())
    assert summary["trained"] == ["ensemble"]
    assert main(["scope-report", "--config", cfg]) != 0  # confidence invalidated by the new ensemble
    assert main(["train", "--config", cfg, "--only", "confidence"]) == 0
    assert main(["scope-report", "--config", cfg]) == 0


def test_subsets_flag(trained, tmp_path, capsys):
    d, _ = trained
    shutil.copytree(d / "work", tmp_path / "work")
    shutil.copytree(d / "data", tmp_path / "data")
    cfg = write_config(tmp_path)
    assert main(["evaluate", "--config", cfg, "--subsets", "radiology", "--subsets", "lab,radiology"]) == 0
    ev = json.loads((tmp_path / "work" / "reports" / "evaluate.json").read_text())
    assert [r["subset"] for r in ev["ablation"]] == [["radiology"], ["lab", "radiology"]]
    assert main(["evaluate", "--config", cfg, "--subsets", "xray"]) != 0
    assert err_line(capsys).startswith("error: UnknownModality:")


def test_schema_violations(tmp_path, capsys):
    bad = dict(SMALL, schema_version=7)
    assert main(["synth", "--config", write_config(tmp_path, bad)]) != 0
    assert err_line(capsys).startswith("error: SchemaViolation:")
    with pytest.raises(SchemaViolation):
        parse_config({**SMALL, "extra": {}})
    with pytest.raises(SchemaViolation):
        parse_config({**SMALL, "generator": {"n_episodes": 10, "mean_codes": 0.2}})
    with pytest.raises(SchemaViolation):
        parse_config({**SMALL, "models": {"bogus": 1}})
    with pytest.raises(UnknownModality):
        parse_config({**SMALL, "evaluation": {"ablations": [["notes"]]}})
    corpus = tmp_path / "data" / "corpus.jsonl"
    corpus.parent.mkdir()
    corpus.write_text('{"episode_id": "x"}\n')
    assert main(["prepare", "--config", write_config(tmp_path)]) != 0
    assert err_line(capsys).startswith("error: SchemaViolation:")


def test_lock_blocks_concurrent_writers(tmp_path, capsys):
    cfg = write_config(tmp_path)
    with work_lock(tmp_path / "work"):
        with pytest.raises(WorkDirLocked):
            with work_lock(tmp_path / "work"):
                pass
        assert main(["synth", "--config", cfg]) != 0
        assert err_line(capsys).startswith("error: WorkDirLocked:")
    assert not (tmp_path / "work" / ".lock").exists()


def test_default_config_parses_and_hash_ignores_paths(tmp_path):
    doc = yaml.safe_load(default_config_text())
    a = parse_config(doc, tmp_path)
    assert a.generator.n_episodes == 5000 and a.split_ratios == (0.7, 0.1, 0.2)
    moved = dict(doc, paths={"corpus": "elsewhere.jsonl", "work_dir": "w2"})
    assert parse_config(moved, tmp_path).hash == a.hash
    changed = dict(doc, split={"ratios": [0.7, 0.1, 0.2], "seed": 1})
    assert parse_config(changed, tmp_path).hash != a.hash


def test_print_config(capsys):
    assert main(["print-config"]) == 0
    assert "schema_version: 1" in capsys.readouterr().out
