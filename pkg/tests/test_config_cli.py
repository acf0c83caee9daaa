import json
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from hoigen.cli import main
from hoigen.config import VERSION, ConfigError, RunConfig, desk_scale_config

torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.n_points == 1024 and cfg.l_max == 150
    with pytest.raises(ConfigError):
        RunConfig(n_points=0)
    with pytest.raises(ConfigError):
        RunConfig(l_max=151)
    with pytest.raises(ConfigError):
        RunConfig(diffusion_steps=0)
    with pytest.raises(ConfigError):
        RunConfig(d_model=50, n_heads=4)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="warp_speed"):
        RunConfig.from_dict({"warp_speed": 9})


def test_config_load_json_and_toml(tmp_path):
    cfg = desk_scale_config(seed=5)
    jpath = tmp_path / "c.json"
    cfg.save(jpath)
    assert RunConfig.load(jpath) == cfg
    tpath = tmp_path / "c.toml"
    tpath.write_text("n_points = 32\nseed = 5\n")
    loaded = RunConfig.load(tpath)
    assert loaded.n_points == 32 and loaded.seed == 5
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.toml")
    bad = tmp_path / "c.yaml"
    bad.write_text("n_points: 32")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_config_hash_stability():
    a = desk_scale_config()
    b = desk_scale_config()
    assert a.hash == b.hash
    assert a.hash != desk_scale_config(seed=1).hash
    stamp = a.stamp()
    assert stamp["version"] == VERSION and stamp["config_hash"] == a.hash


def test_desk_scale_config_shape():
    cfg = desk_scale_config()
    assert cfg.n_points == 128 and cfg.l_max == 60 and cfg.diffusion_steps == 100


# ---------------------------------------------------------------------------
# CLI end to end on a tiny configuration
# ---------------------------------------------------------------------------

TINY = dict(n_points=32, diffusion_steps=5, l_max=60, d_model=16, n_layers=1,
            n_heads=4, batch_size=4, contact_steps=5, motion_steps=5,
            refiner_steps=3, length_steps=5, lr=1e-3, eval_runs=2,
            classifier_hidden=16, diversity_pairs=8)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus plus a full set of tiny trained checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    runner = CliRunner()
    r = runner.invoke(main, ["prepare-data", "-c", str(cfg_path),
                             "--out", str(root / "corpus"), "--clips", "8"])
    assert r.exit_code == 0, r.output
    for cmd in (["train-contact"], ["train-motion"],
                ["train-refiner", "--generator-samples", "2"]):
        r = runner.invoke(main, cmd + ["-c", str(cfg_path),
                                       "--data", str(root / "corpus"),
                                       "--checkpoints", str(root / "ckpt")])
        assert r.exit_code == 0, r.output
    return root


def test_cli_version():
    r = CliRunner().invoke(main, ["--version"])
    assert r.exit_code == 0 and VERSION in r.output


def test_prepare_data_writes_manifest(workdir):
    manifest = json.loads((workdir / "corpus" / "manifest.json").read_text())
    assert manifest["counts"]["clips"] == 8
    assert (workdir / "corpus" / "objects" / "sphere.obj").exists()


def test_training_wrote_all_checkpoints(workdir):
    for name in ("contact.pt", "motion.pt", "refiner.pt", "length.pt"):
        assert (workdir / "ckpt" / name).exists()
    payload = torch.load(workdir / "ckpt" / "contact.pt", weights_only=False)
    assert payload["kind"] == "contact"
    assert payload["version"] == VERSION
    assert payload["config_hash"] == RunConfig.from_dict(payload["config"]).hash


def test_generate_deterministic_per_seed(workdir):
    runner = CliRunner()
    args = ["generate", "--text", "Grab a sphere with both hands.",
            "--object", str(workdir / "corpus" / "objects" / "sphere.obj"),
            "--checkpoints", str(workdir / "ckpt"), "--seed", "11"]
    r1 = runner.invoke(main, args + ["--out", str(workdir / "m1.jsonl")])
    assert r1.exit_code == 0, r1.output
    r2 = runner.invoke(main, args + ["--out", str(workdir / "m2.jsonl")])
    assert r2.exit_code == 0, r2.output
    assert (workdir / "m1.jsonl").read_bytes() == (workdir / "m2.jsonl").read_bytes()
    r3 = runner.invoke(main, ["generate", "--text", "Grab a sphere with both hands.",
                              "--object", str(workdir / "corpus" / "objects" / "sphere.obj"),
                              "--checkpoints", str(workdir / "ckpt"), "--seed", "12",
                              "--out", str(workdir / "m3.jsonl")])
    assert r3.exit_code == 0
    assert (workdir / "m1.jsonl").read_bytes() != (workdir / "m3.jsonl").read_bytes()


def test_generate_header_has_provenance(workdir):
    header = json.loads((workdir / "m1.jsonl").read_text().splitlines()[0])
    assert header["config_hash"] == RunConfig.from_dict(TINY).hash
    assert header["version"] == VERSION
    assert header["refined"] is True
    assert header["hand_type"] == "both"


def test_generate_right_hand_omits_left_channels(workdir):
    runner = CliRunner()
    out = workdir / "right.jsonl"
    r = runner.invoke(main, ["generate", "--text", "Grab a sphere with the right hand.",
                             "--object", str(workdir / "corpus" / "objects" / "sphere.obj"),
                             "--checkpoints", str(workdir / "ckpt"),
                             "--out", str(out)])
    assert r.exit_code == 0, r.output
    recs = [json.loads(ln) for ln in out.read_text().splitlines()]
    assert recs[0]["hand_type"] == "right"
    assert all("lhand" not in rec for rec in recs[1:])
    assert all("rhand" in rec and "obj" in rec for rec in recs[1:])


def test_generate_with_export_dir(workdir):
    runner = CliRunner()
    r = runner.invoke(main, ["generate", "--text", "Lift a sphere with both hands.",
                             "--object", str(workdir / "corpus" / "objects" / "sphere.obj"),
                             "--checkpoints", str(workdir / "ckpt"), "--length", "3",
                             "--out", str(workdir / "e.jsonl"),
                             "--export-dir", str(workdir / "objs")])
    assert r.exit_code == 0, r.output
    assert (workdir / "objs" / "object_0000.obj").exists()
    assert (workdir / "objs" / "hand_left_0002.obj").exists()
    assert (workdir / "objs" / "hand_right_0000.obj").exists()
    manifest = json.loads((workdir / "objs" / "manifest.json").read_text())
    assert manifest["frames"] == 3
    assert len(manifest["files"]) == 9  # (object + two hands) x 3 frames


def test_export_command_roundtrip(workdir):
    runner = CliRunner()
    r = runner.invoke(main, ["export", "--motion", str(workdir / "m1.jsonl"),
                             "--object", str(workdir / "corpus" / "objects" / "sphere.obj"),
                             "--n-points", "32", "--out", str(workdir / "exported")])
    assert r.exit_code == 0, r.output
    assert (workdir / "exported" / "object_0000.obj").exists()
    assert (workdir / "exported" / "manifest.json").exists()


def test_evaluate_writes_report(workdir):
    runner = CliRunner()
    out = workdir / "report.json"
    cfg_path = workdir / "config.json"
    r = runner.invoke(main, ["evaluate", "-c", str(cfg_path),
                             "--data", str(workdir / "corpus"),
                             "--checkpoints", str(workdir / "ckpt"),
                             "--runs", "2", "--samples-per-run", "3",
                             "--out", str(out)])
    assert r.exit_code == 0, r.output
    report = json.loads(out.read_text())
    assert report["n_runs"] == 2
    assert set(report["per_run"]) == {"accuracy_top3", "fid", "diversity",
                                      "multimodality", "physical_realism"}
    assert all(len(v) == 2 for v in report["per_run"].values())
    assert report["config_hash"] == RunConfig.from_dict(TINY).hash
    assert "aggregate" in report


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

def test_exit_code_config_error(tmp_path):
    r = CliRunner().invoke(main, ["prepare-data", "-c", str(tmp_path / "nope.toml"),
                                  "--out", str(tmp_path / "c")])
    assert r.exit_code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"warp_speed": 9}))
    r = CliRunner().invoke(main, ["prepare-data", "-c", str(bad),
                                  "--out", str(tmp_path / "c")])
    assert r.exit_code == 2


def test_exit_code_missing_prerequisite(workdir, tmp_path):
    r = CliRunner().invoke(main, ["train-motion", "-c", str(workdir / "config.json"),
                                  "--data", str(workdir / "corpus"),
                                  "--checkpoints", str(tmp_path / "empty")])
    assert r.exit_code == 3
    r = CliRunner().invoke(main, ["generate", "--text", "Grab a sphere with both hands.",
                                  "--object", str(workdir / "corpus" / "objects" / "sphere.obj"),
                                  "--checkpoints", str(tmp_path / "empty"),
                                  "--out", str(tmp_path / "m.jsonl")])
    assert r.exit_code == 3


def test_exit_code_runtime_failure(workdir, tmp_path):
    corrupt = tmp_path / "corrupt.jsonl"
    corrupt.write_text(json.dumps({"L": 5, "hand_type": "both"}) + "\n")  # no frames
    r = CliRunner().invoke(main, ["export", "--motion", str(corrupt),
                                  "--object", str(workdir / "corpus" / "objects" / "sphere.obj"),
                                  "--out", str(tmp_path / "out")])
    assert r.exit_code == 4
