"""End-to-end pipeline smoke test plus CLI error-path contracts."""

import json
from pathlib import Path

import pytest

from segdt import cli, trajlog
from segdt.manifest import RunManifest, hash_artifact
from segdt.nn import TrainingDiverged

SMOKE = Path(__file__).parents[1] / "configs" / "smoke"


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run every stage once on the in-repo smoke configs (~seconds)."""
    d = tmp_path_factory.mktemp("pipeline")
    p = {
        "dataset": d / "data.jsonl", "ensemble": d / "ensemble",
        "segmented": d / "seg.jsonl", "policy": d / "policy.json",
        "index": d / "index.npz", "predictor": d / "predictor",
        "report": d / "report.json", "calibration": d / "calibration.json",
    }
    stages = [
        ["collect", "--config", SMOKE / "collect.cfg", "--out", p["dataset"]],
        ["train-return", "--config", SMOKE / "return.cfg",
         "--dataset", p["dataset"], "--out", p["ensemble"]],
        ["segment", "--config", SMOKE / "segment.cfg", "--dataset",
         p["dataset"], "--ensemble", p["ensemble"], "--out", p["segmented"]],
        ["train-policy", "--config", SMOKE / "policy.cfg",
         "--segmented", p["segmented"], "--out", p["policy"]],
        ["build-kdtree", "--config", SMOKE / "index.cfg", "--segmented",
         p["segmented"], "--out", p["index"],
         "--predictor-out", p["predictor"]],
        ["evaluate", "--config", SMOKE / "evaluate.cfg", "--policy",
         p["policy"], "--dataset", p["dataset"], "--index", p["index"],
         "--predictor", p["predictor"], "--out", p["report"]],
        ["calibrate", "--config", SMOKE / "calibrate.cfg", "--dataset",
         p["dataset"], "--ensemble", p["ensemble"], "--out", p["calibration"]],
    ]
    for argv in stages:
        assert run(argv) == 0, f"stage failed: {argv[0]}"
    return p


def test_pipeline_artifacts_exist(pipeline):
    for path in pipeline.values():
        assert path.exists(), path


def test_pipeline_report_contents(pipeline):
    report = json.loads(pipeline["report"].read_text())
    (name, entry), = report.items()
    assert name == "unrest"
    assert len(entry["episodes"]) == 3
    assert 0.0 <= entry["aggregates"]["route_completion"]["mean"] <= 1.0

    calib = json.loads(pipeline["calibration"].read_text())
    assert calib["forecast"]["coverage_1sigma"] >= 0.0
    assert len(calib["forecast"]["members"]) == 2
    assert sum(calib["uncertainty"]["counts"]) > 0


def test_manifests_record_inputs_and_outputs(pipeline):
    m = RunManifest.load(RunManifest.manifest_path(pipeline["segmented"]))
    assert m.command == "segment"
    assert set(m.inputs) == {"dataset", "ensemble"}
    assert m.outputs["segmented"]["sha256"] == hash_artifact(pipeline["segmented"])
    assert m.inputs["dataset"]["sha256"] == hash_artifact(pipeline["dataset"])


def test_rerun_reproduces_artifact_hashes(pipeline, tmp_path):
    out = tmp_path / "data2.jsonl"
    assert run(["collect", "--config", SMOKE / "collect.cfg",
                "--out", out]) == 0
    assert hash_artifact(out) == hash_artifact(pipeline["dataset"])

    seg2 = tmp_path / "seg2.jsonl"
    assert run(["segment", "--config", SMOKE / "segment.cfg", "--dataset", out,
                "--ensemble", pipeline["ensemble"], "--out", seg2]) == 0
    assert hash_artifact(seg2) == hash_artifact(pipeline["segmented"])


def test_flags_override_config_file(tmp_path):
    out = tmp_path / "tiny.jsonl"
    assert run(["collect", "--config", SMOKE / "collect.cfg",
                "--episodes", 2, "--out", out]) == 0
    assert len(trajlog.load(out)) == 2


def test_overwrite_refused_without_force(pipeline, capsys):
    rc = run(["collect", "--config", SMOKE / "collect.cfg",
              "--episodes", 1, "--out", pipeline["dataset"]])
    assert rc == 2
    assert "error: code=2" in capsys.readouterr().err
    # the artifact is untouched
    assert len(trajlog.load(pipeline["dataset"])) == 30


def test_overwrite_allowed_with_force(tmp_path):
    out = tmp_path / "d.jsonl"
    for _ in range(2):
        assert run(["collect", "--config", SMOKE / "collect.cfg",
                    "--episodes", 1, "--out", out, "--force"]) == 0


def test_missing_artifact_exit_3(tmp_path, capsys):
    rc = run(["train-return", "--config", SMOKE / "return.cfg",
              "--dataset", tmp_path / "absent.jsonl", "--out", tmp_path / "e"])
    assert rc == 3
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "error: code=3" in err


def test_unknown_config_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("episodes = 2\nnot_a_key = 1\n")
    rc = run(["collect", "--config", bad, "--out", tmp_path / "d.jsonl"])
    assert rc == 2
    assert "not_a_key" in capsys.readouterr().err


def test_bad_config_value_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("episodes = lots\n")
    rc = run(["collect", "--config", bad, "--out", tmp_path / "d.jsonl"])
    assert rc == 2
    assert "episodes" in capsys.readouterr().err


def test_degenerate_epsilon_warns(pipeline, tmp_path, capsys):
    out = tmp_path / "seg_high.jsonl"
    rc = run(["segment", "--dataset", pipeline["dataset"], "--ensemble",
              pipeline["ensemble"], "--epsilon", 1e9, "--c", 3, "--out", out])
    assert rc == 0
    assert "warning" in capsys.readouterr().err
    from segdt.segmenter import load_segmented
    segs = load_segmented(out)
    assert all(len(s.parts) == 1 and s.parts[0].label == "certain"
               for s in segs)


def test_divergence_exit_4(pipeline, tmp_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingDiverged("non-finite loss")

    monkeypatch.setattr(cli, "train_return_models", boom)
    rc = run(["train-return", "--config", SMOKE / "return.cfg", "--dataset",
              pipeline["dataset"], "--out", tmp_path / "ens"])
    assert rc == 4
    assert "error: code=4" in capsys.readouterr().err
