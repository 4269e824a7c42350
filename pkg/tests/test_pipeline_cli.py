import json

import numpy as np
import pytest

from slicerecon.calibrate import synthetic_grid
from slicerecon.cli import main
from slicerecon.errors import InvalidConfig
from slicerecon.io import load_stack, read_json, save_raster
from slicerecon.pipeline import ARMS, PipelineConfig, load_config, run_pipeline
from slicerecon.refine.variational import RefineConfig

from helpers import small_config


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, run_pipeline(small_config(out))


def test_full_run_artifacts(full_run):
    out, res = full_run
    assert res.status == "ok" and res.exit_code == 0
    report = read_json(out / "report.json")
    assert set(report["arms"]) == {"input", *ARMS}
    for arm in ARMS:
        rep = report["arms"][arm]
        assert {"dice", "iou", "hd95", "dc", "dc_abs", "per_slice_dice"} <= set(rep)
        assert abs(rep["iou"] - rep["dice"] / (2 - rep["dice"])) <= 1e-9
    for rel in ("phantom/ground_truth.json", "ocm/transforms.json", "ocm/ocm_trace.csv",
                "refine/refine_trace.csv", "refine/hybrid/stack/stack.json", "measurements.json",
                "volumes/hybrid.json", "smooth/hybrid_contours.json"):
        assert (out / rel).exists(), rel
    manifest = read_json(out / "run_manifest.json")
    assert [s["stage"] for s in manifest["stages"]] == ["phantom", "ocm", "refine", "smooth", "reconstruct",
                                                       "evaluate"]
    assert all(s["status"] == "ok" and s["seconds"] >= 0 for s in manifest["stages"])
    assert manifest["seed"] == 3 and "numpy" in manifest["versions"]


def test_hybrid_beats_input(full_run):
    _, res = full_run
    arms = res.report["arms"]
    assert arms["hybrid"]["dice"] > arms["input"]["dice"]
    assert arms["ocm_only"]["dice"] > arms["input"]["dice"]


def test_disabling_refine_keeps_ocm_metrics(full_run, tmp_path):
    _, res = full_run
    cfg = small_config(tmp_path, stages={"refine": False}, arms=["ocm_only"])
    other = run_pipeline(cfg)
    assert other.report["arms"]["ocm_only"] == res.report["arms"]["ocm_only"]
    assert not (tmp_path / "refine").exists()


def test_phantom_only(tmp_path):
    stages = {s: s == "phantom" for s in ("phantom", "ocm", "refine", "smooth", "reconstruct", "evaluate")}
    res = run_pipeline(small_config(tmp_path, stages=stages))
    assert res.status == "ok"
    assert (tmp_path / "phantom" / "perturbed" / "stack.json").exists()
    assert not (tmp_path / "ocm").exists() and not (tmp_path / "report.json").exists()


def test_invalid_path_rejected_before_work(tmp_path):
    cfg = small_config(tmp_path / "out", input_stack=str(tmp_path / "missing"))
    with pytest.raises(InvalidConfig):
        run_pipeline(cfg)
    assert not (tmp_path / "out").exists()


def test_config_validation():
    with pytest.raises(InvalidConfig):
        PipelineConfig(stages={"bogus": True}).validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig(arms=["best"]).validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig(refine=RefineConfig(backend="amortized")).validate()
    with pytest.raises(InvalidConfig):
        PipelineConfig.from_dict({"colour": "red"})


def test_config_round_trip(tmp_path):
    cfg = small_config(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_failed_stage_recorded(tmp_path):
    # a reference-free input stack cannot be evaluated
    stages = {s: s == "phantom" for s in ("phantom", "ocm", "refine", "smooth", "reconstruct", "evaluate")}
    run_pipeline(small_config(tmp_path / "src", stages=stages))
    cfg = small_config(tmp_path / "out", input_stack=str(tmp_path / "src" / "phantom" / "perturbed"),
                       stages={"phantom": False, "refine": False})
    res = run_pipeline(cfg)
    assert res.status == "failed" and res.exit_code == 2
    manifest = read_json(tmp_path / "out" / "run_manifest.json")
    assert manifest["failed_stage"] == "evaluate"
    assert (tmp_path / "out" / "ocm" / "transforms.json").exists()


# ---------------------------------------------------------------- CLI

def test_print_defaults(capsys):
    assert main(["--print-defaults"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["refine"]["lam"] == 0.01 and d["refine"]["window"] == 9
    assert d["ocm"]["restarts"] == 5


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("SLICERECON_OUTPUT_DIR", raising=False)
    assert main(["register", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 4
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["run", str(tmp_path / "bad.json")]) == 2
    (tmp_path / "unknown.json").write_text('{"colour": 1}')
    assert main(["run", str(tmp_path / "unknown.json")]) == 2
    assert main([]) == 2


def test_cli_workflow(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("SLICERECON_OUTPUT_DIR", raising=False)
    ph = tmp_path / "ph"
    assert main(["phantom", "--size", "48", "--n-slices", "4", "--amplitude", "2", "--seed", "1",
                 "--out", str(ph)]) == 0
    assert read_json(ph / "ground_truth.json")["transforms"][0]["s"] == 1.0

    reg = tmp_path / "reg"
    assert main(["register", str(ph / "perturbed"), "--stage", "ocm", "--out", str(reg)]) == 0
    assert len(read_json(reg / "transforms.json")) == 4
    assert main(["register", str(ph / "perturbed"), "--stage", "refine", "--backend", "amortized",
                 "--out", str(reg)]) == 2

    grid = tmp_path / "grid.pgm"
    save_raster(grid, synthetic_grid(seed=0))
    assert main(["calibrate", str(grid), "--pitch", "10", "--out", str(tmp_path)]) == 0
    assert read_json(tmp_path / "scale.json")["S"] == pytest.approx(0.2, rel=0.01)

    rec = tmp_path / "rec"
    assert main(["reconstruct", str(reg / "ocm"), "--scale", str(tmp_path / "scale.json"), "--out", str(rec)]) == 0
    meas = read_json(rec / "measurements.json")
    assert meas["L"] >= meas["W"] >= meas["T"] > 0

    ev = tmp_path / "ev"
    assert main(["evaluate", str(reg / "ocm"), str(ph / "truth"), "--out", str(ev)]) == 0
    assert read_json(ev / "report.json")["dice"] > 0.9

    sm = tmp_path / "sm"
    stack = load_stack(ph / "truth")
    save_raster(tmp_path / "m.pgm", stack[1])
    assert main(["smooth", str(tmp_path / "m.pgm"), "--out", str(sm)]) == 0
    assert read_json(sm / "contour.json")["segments"]

    tr = tmp_path / "tr"
    assert main(["train", str(reg / "ocm"), "--epochs", "1", "--out", str(tr)]) == 0
    assert (tr / "predictor.npz").exists()
    hy = tmp_path / "hy"
    assert main(["register", str(reg / "ocm"), "--stage", "refine", "--backend", "amortized",
                 "--params", str(tr / "predictor.npz"), "--out", str(hy)]) == 0
    assert len(load_stack(hy / "refined")) == 4


def test_cli_stats(tmp_path, capsys):
    a, b = [], []
    for i in range(6):
        pa, pb = tmp_path / f"a{i}.json", tmp_path / f"b{i}.json"
        pa.write_text(json.dumps({"dice": 0.9 + 0.01 * i}))
        pb.write_text(json.dumps({"dice": 0.8 + 0.005 * i}))
        a.append(str(pa))
        b.append(str(pb))
    capsys.readouterr()
    assert main(["stats", "--a", *a, "--b", *b]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["p_value"] == pytest.approx(2 / 2 ** 6) and res["method"] == "exact"


def test_env_overrides_output(tmp_path, monkeypatch):
    monkeypatch.setenv("SLICERECON_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["phantom", "--size", "32", "--n-slices", "2", "--out", str(tmp_path / "ignored")]) == 0
    assert (tmp_path / "env" / "truth" / "stack.json").exists()
    assert not (tmp_path / "ignored").exists()
