import csv
import json

import pytest

from glha.cli import main
from glha.training import summarize_records

TINY = {
    "seed": 3,
    "scene": {"n": 64, "inlier_rate": 0.3},
    "dataset": {"n_pairs": 12, "splits": [0.5, 0.25, 0.25]},
    "model": {"channels": 8, "feature_layers": 1, "refine_layers": 1, "ca_groups": 2, "ca_reduction": 2,
              "batch_size": 2, "iters": 4, "warmup_iters": 2, "eval_every": 2},
    "theorem": {"n_samples": 200},
}


def _config(tmp_path, doc=TINY, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_is_byte_identical(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert _run(capsys, "gen", "--config", cfg, "--out", tmp_path / "a")[0] == 0
    assert _run(capsys, "gen", "--config", cfg, "--out", tmp_path / "b")[0] == 0
    for split in ("train", "val", "test"):
        a = (tmp_path / "a" / "data" / f"{split}.jsonl").read_bytes()
        assert a and a == (tmp_path / "b" / "data" / f"{split}.jsonl").read_bytes()


@pytest.mark.parametrize("doc", [
    {**TINY, "colour": 1},
    {**TINY, "model": {**TINY["model"], "loss": "focal"}},
    {**TINY, "scene": {"seed": 4}},
    {**TINY, "eval": {"post": "magic"}},
])
def test_config_errors_exit_2(tmp_path, capsys, doc):
    code, _, err = _run(capsys, "gen", "--config", _config(tmp_path, doc))
    assert code == 2
    assert json.loads(err)["exit_code"] == 2


def test_invalid_json_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{seed: 1")
    assert _run(capsys, "gen", "--config", path)[0] == 2


@pytest.mark.parametrize("command", ["prior", "train", "eval", "posebench"])
def test_missing_inputs_exit_3(tmp_path, capsys, command):
    code, _, err = _run(capsys, command, "--config", _config(tmp_path))
    assert code == 3
    assert "not found" in json.loads(err)["message"]


def test_theorem_report(tmp_path, capsys):
    code, out, _ = _run(capsys, "theorem", "--config", _config(tmp_path))
    assert code == 0 and json.loads(out)["failures"] == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["max_residual"] < 1e-9 and report["max_linear_product"] <= 1e-12
    assert report["config"]["seed"] == 3


def test_oracle_eval_is_perfect(tmp_path, capsys):
    doc = {**TINY, "scene": {"n": 64, "noise": 0.0}, "eval": {"model": "oracle"}}
    cfg = _config(tmp_path, doc)
    _run(capsys, "gen", "--config", cfg)
    code, out, _ = _run(capsys, "eval", "--config", cfg)
    assert code == 0
    assert json.loads(out)["F1"] == 1.0


def test_full_pipeline_outputs_are_self_describing(tmp_path, capsys):
    cfg = _config(tmp_path)
    for cmd in ("gen", "prior", "train", "eval", "posebench"):
        code, _, err = _run(capsys, cmd, "--config", cfg, "--deterministic")
        assert code == 0, (cmd, err)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert summarize_records(metrics["pairs"], 3) == metrics["summary"]
    resolved = metrics["config"]
    assert resolved["seed"] == 3 and resolved["model"]["seed"] == 3
    assert resolved["model"]["channels"] == 8
    for name in ("gen.json", "train.json", "posebench.json", "prior.json"):
        assert json.loads((tmp_path / name).read_text())["config"] == resolved
    with open(tmp_path / "curves.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["iter"] for r in rows] == ["2", "4"]
    assert set(json.loads((tmp_path / "posebench.json").read_text())) >= {
        "raw_ransac", "classifier+weighted8pt", "classifier+ransac"}
