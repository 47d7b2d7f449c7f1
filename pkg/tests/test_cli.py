"""End-to-end pipeline through the command-line entry points."""

import hashlib
import json
import shutil

import numpy as np
import pytest

from lutdnn import cli
from lutdnn.compiler import load_lutnet, save_lutnet
from lutdnn.config import config_digest, resolve_config

TINY = {
    "name": "tiny",
    "seed": 5,
    "model": {"inputs": 8, "layers": [6, 3], "bits": 2, "fanin": 2,
              "degree": 1, "adders": 2},
    "mask_search": {"epochs": 3, "batch_size": 32, "lr": 0.05},
    "train": {"epochs": 4, "batch_size": 32, "lr": 0.002,
              "calibration_samples": 128},
    "data": {"kind": "synth", "features": 8, "classes": 3,
             "separability": 2.5, "train_count": 256, "test_count": 64,
             "seed": 3},
}


def write_cfg(dirpath, cfg=TINY):
    path = dirpath / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full run: every stage, exit code asserted, artifacts kept."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_cfg(root)
    out = str(root / "run")
    assert run("train-mask", "--config", cfg, "--out", out) == 0
    assert run("train", "--config", cfg, "--out", out) == 0
    assert run("compile", "--config", cfg, "--out", out) == 0
    assert run("emit-rtl", "--config", cfg, "--out", out, "--samples", "16") == 0
    assert run("simulate", "--config", cfg, "--out", out, "--samples", "500") == 0
    assert run("report", "--config", cfg, "--out", out) == 0
    return root, cfg, out


def test_pipeline_artifacts_exist(pipeline):
    _, _, out = pipeline
    from pathlib import Path

    for rel in ("mask.json", "mask_log.json", "model.ckpt", "train_log.json",
                "net.lutnet", "resources.json", "rtl/top.v", "tb/vectors.hex",
                "tb/tb_top.v", "equivalence.json", "accuracy.json",
                "report.json", "manifest.json"):
        assert (Path(out) / rel).is_file(), rel


def test_pipeline_equivalence_clean(pipeline):
    _, _, out = pipeline
    with open(f"{out}/equivalence.json") as fh:
        eq = json.load(fh)
    assert eq["mismatches"] == 0
    assert eq["first_mismatch"] is None
    assert eq["checked"] == eq["boundary_vectors"] + 500


def test_pipeline_manifest_hashes(pipeline):
    _, _, out = pipeline
    with open(f"{out}/manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["config_digest"] == config_digest(resolve_config(TINY))
    stages = manifest["stages"]
    assert set(stages) >= {"train-mask", "train", "compile", "emit-rtl",
                           "simulate", "report"}
    for outputs in (stages["train"]["outputs"], stages["compile"]["outputs"]):
        for fname, digest in outputs.items():
            blob = open(f"{out}/{fname}", "rb").read()
            assert hashlib.sha256(blob).hexdigest() == digest


def test_pipeline_resources_estimate_matches(pipeline):
    _, _, out = pipeline
    with open(f"{out}/resources.json") as fh:
        res = json.load(fh)
    assert res["estimate_matches_actual"] is True
    assert res["actual"]["total_entries"] == res["estimate"]["total_entries"]


def test_report_prints_summary(pipeline, capsys):
    _, cfg, out = pipeline
    assert run("report", "--config", cfg, "--out", out) == 0
    text = capsys.readouterr().out
    assert "table entries" in text
    assert "equivalence: PASS" in text


def test_config_error_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**TINY, "bogus": 1}))
    assert run("train-mask", "--config", str(p), "--out", str(tmp_path / "o")) == 2


def test_missing_prerequisites_exit_code(tmp_path):
    cfg = write_cfg(tmp_path)
    out = str(tmp_path / "empty")
    assert run("train", "--config", cfg, "--out", out) == 5
    assert run("compile", "--config", cfg, "--out", out) == 5
    assert run("simulate", "--config", cfg, "--out", out) == 5
    assert run("train", "--config", cfg, "--out", out,
               "--mask", str(tmp_path / "nothere.json")) == 5


def test_checkpoint_digest_chain_guard(pipeline, tmp_path):
    _, _, out = pipeline
    other = tmp_path / "run"
    other.mkdir()
    shutil.copy(f"{out}/model.ckpt", other / "model.ckpt")
    drifted = dict(TINY, seed=TINY["seed"] + 1)
    cfg = write_cfg(tmp_path, drifted)
    assert run("compile", "--config", cfg, "--out", str(other)) == 2


def test_netlist_digest_chain_guard(pipeline, tmp_path):
    _, _, out = pipeline
    other = tmp_path / "run"
    other.mkdir()
    for f in ("model.ckpt", "net.lutnet"):
        shutil.copy(f"{out}/{f}", other / f)
    drifted = dict(TINY, name="renamed")
    cfg = write_cfg(tmp_path, drifted)
    # checkpoint digest trips first; both carry the digest of the old config
    assert run("emit-rtl", "--config", cfg, "--out", str(other)) == 2


def test_corrupted_netlist_fails_equivalence(pipeline, tmp_path):
    root, cfg, out = pipeline
    other = tmp_path / "run"
    other.mkdir()
    for f in ("model.ckpt", "net.lutnet"):
        shutil.copy(f"{out}/{f}", other / f)
    net = load_lutnet(other / "net.lutnet")
    table = net.layers[-1].neurons[0].sub_tables[0]
    qmax = (1 << table.output_bits) - 1
    table.entries[:] = qmax - table.entries
    save_lutnet(net, other / "net.lutnet")
    assert run("simulate", "--config", cfg, "--out", str(other),
               "--samples", "50") == 4
    with open(other / "equivalence.json") as fh:
        eq = json.load(fh)
    assert eq["mismatches"] > 0


def test_method_and_seed_overrides(tmp_path):
    cfg = write_cfg(tmp_path)
    out = str(tmp_path / "rand")
    assert run("train-mask", "--config", cfg, "--out", out,
               "--method", "random", "--seed", "9") == 0
    with open(f"{out}/mask_log.json") as fh:
        log = json.load(fh)
    assert log["method"] == "random"
    with open(f"{out}/mask.json") as fh:
        meta = json.load(fh)["meta"]
    assert meta["method"] == "random"
    assert meta["seed"] == 9


def test_same_seed_runs_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert run("train-mask", "--config", cfg, "--out", out) == 0
        assert run("train", "--config", cfg, "--out", out) == 0
        assert run("compile", "--config", cfg, "--out", out) == 0
        outs.append(out)
    a, b = outs
    for f in ("mask.json", "model.ckpt", "net.lutnet"):
        assert open(f"{a}/{f}", "rb").read() == open(f"{b}/{f}", "rb").read(), f
