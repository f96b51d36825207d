from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

from protoerase.cli import load_config, main
from protoerase.errors import InvalidConfigError


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = {
        "world": {"seed": 0},
        "pipeline": {"N": 16, "M": 2, "K": 3, "L": 4, "U": 2000, "eta": 0.05, "seed": 0},
        "eval": {"n_prompts": 20, "n_seeds": 1, "seed": 0},
    }
    Path("protoerase.json").write_text(json.dumps(config))
    return tmp_path


def test_print_config_resolves_defaults(workdir, capsys):
    assert main(["--print-config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["pipeline"]["N"] == 16
    assert doc["guidance"]["alpha"] == 7.5
    assert doc["paths"]["bank"] == "bank.json"


def test_env_override(workdir, monkeypatch, capsys):
    monkeypatch.setenv("PROTO_ERASE_PIPELINE_K", "5")
    monkeypatch.setenv("PROTO_ERASE_PATHS_BANK", '"other.json"')
    assert main(["--print-config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["pipeline"]["K"] == 5
    assert doc["paths"]["bank"] == "other.json"


def test_no_command_prints_help(workdir):
    assert main([]) == 2


def test_full_pipeline(workdir, capsys):
    assert main(["extract"]) == 0
    bank_doc = json.loads(Path("bank.json").read_text())
    assert bank_doc["stage"] == "image"
    assert len(bank_doc["entries"]) == 3
    assert all(e["cluster_size"] >= 1 for e in bank_doc["entries"])

    assert main(["optimize"]) == 0
    bank_doc = json.loads(Path("bank.json").read_text())
    assert bank_doc["stage"] == "textual"
    assert Path("world.json").exists()

    assert main(["calibrate", "--n", "100"]) == 0
    calib = json.loads(Path("calibration.json").read_text())
    assert 0.0 < calib["tau"] < 1.0
    assert "hazard" in calib["detectors"]

    assert main(["sample"]) == 0
    first = Path("records.jsonl").read_bytes()
    assert main(["sample"]) == 0
    assert Path("records.jsonl").read_bytes() == first  # byte-identical rerun

    lines = [json.loads(l) for l in first.decode().splitlines()]
    assert len(lines) == 20
    assert all(l["selected"] is not None for l in lines)

    os.environ["PROTO_ERASE_PATHS_RECORDS"] = '"base.jsonl"'
    try:
        assert main(["sample", "--no-erase"]) == 0
    finally:
        del os.environ["PROTO_ERASE_PATHS_RECORDS"]

    assert main(["eval", "--records", "records.jsonl", "--baseline-records", "base.jsonl"]) == 0
    out = capsys.readouterr().out
    assert "delta=" in out
    report = json.loads((Path("reports") / "eval.json").read_text())
    assert report["flagged_rate"] <= 0.2
    base_report = json.loads((Path("reports") / "eval_baseline.json").read_text())
    assert base_report["flagged_rate"] >= 0.8

    assert main(["inspect", "--top", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("hazard/mode") == 3

    assert main(["ablate", "--ks", "1,3"]) == 0
    csv_lines = (Path("reports") / "ablation.csv").read_text().splitlines()
    assert csv_lines[0] == "K,flagged_rate,context_alignment_mean"
    assert len(csv_lines) == 3
    assert (Path("reports") / "ablation.svg").exists()


def test_optimize_zero_iters_warns(workdir, capsys):
    assert main(["extract"]) == 0
    assert main(["optimize", "--iters", "0"]) == 0
    out = capsys.readouterr().out
    assert "random initialization" in out
    doc = json.loads(Path("bank.json").read_text())
    assert doc["stage"] == "textual"  # saved despite the warning


def test_eval_live(workdir, capsys):
    assert main(["extract"]) == 0
    assert main(["optimize"]) == 0
    assert main(["calibrate", "--n", "100"]) == 0
    assert main(["eval", "--live"]) == 0
    out = capsys.readouterr().out
    assert "flagged_rate=" in out
    report = json.loads((Path("reports") / "eval.json").read_text())
    assert report["n_samples"] == 20


def test_sample_explicit_prompt(workdir):
    assert main(["extract"]) == 0
    assert main(["optimize"]) == 0
    assert main(["sample", "--prompt", "0,12", "--tau", "0.2"]) == 0
    lines = Path("records.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["prompt"] == [0, 12]


def test_corrupt_bank_fails_nonzero(workdir, capsys):
    assert main(["extract"]) == 0
    assert main(["optimize"]) == 0
    doc = json.loads(Path("bank.json").read_text())
    doc["entries"][0]["achieved_cosine"] = -0.5
    Path("bank.json").write_text(json.dumps(doc))
    assert main(["sample"]) == 1
    assert "error [sample]" in capsys.readouterr().err


def test_optimize_without_extract_fails(workdir, capsys):
    assert main(["optimize"]) == 1
    assert "error [optimize]" in capsys.readouterr().err


def test_unknown_concept_fails(workdir, capsys):
    assert main(["extract", "--concept", "nope"]) == 1
    assert "error [extract]" in capsys.readouterr().err


def test_world_config_mismatch_detected(workdir, capsys):
    assert main(["extract"]) == 0
    cfg = json.loads(Path("protoerase.json").read_text())
    cfg["world"] = {"seed": 3}
    Path("protoerase.json").write_text(json.dumps(cfg))
    assert main(["extract"]) == 1
    assert "different world config" in capsys.readouterr().err


def test_load_config_rejects_bad_section(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"pipeline": [1, 2]}))
    with pytest.raises(InvalidConfigError):
        load_config(str(p))
    p.write_text(json.dumps({"pipeline": {"bogus_key": 1}}))
    with pytest.raises(InvalidConfigError):
        load_config(str(p))


def test_missing_world_and_seed_is_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    Path("protoerase.json").write_text(json.dumps({"pipeline": {"N": 4, "M": 1}}))
    assert main(["extract"]) == 1
    assert "no world.seed configured" in capsys.readouterr().err
