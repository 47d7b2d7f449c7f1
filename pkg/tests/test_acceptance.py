"""Acceptance gate: one test per shipped guarantee.

Slow shared work (the trained toy pipeline, the digit-trend runs) lives
in module-scoped fixtures so each guarantee still reports as its own
pass/fail line. Tolerances and budgets are pinned in the asserts.
"""

import json
import os
import shutil
import time

import numpy as np
import pytest

import lutdnn.config as C
from lutdnn import cli
from lutdnn.compiler import compile_network, estimate_resources, table_entry_counts, unpack_fields
from lutdnn.data import make_dataset
from lutdnn.neurons import subneuron_values
from lutdnn.rtl import module_tables, parse_rtl_dir, write_rtl
from lutdnn.sim import check_equivalence, evaluate_accuracy, lut_eval
from lutdnn.sparsity import (
    SparsityHyper,
    centrality_ratio,
    deepr_star_step,
    extract_mask,
    init_sparse_weights,
    mask_density_heatmap,
    sparse_update_step,
)
from lutdnn.training import ModelPlan, search_mask, train_model


# --- shared slow fixtures ----------------------------------------------------


@pytest.fixture(scope="module")
def toy_artifacts():
    """The small reference pipeline: search, train 20 epochs, compile."""
    cfg = C.load_preset("toy")
    cfg["train"]["epochs"] = 20
    cfg = C.resolve_config(cfg)
    plan = C.model_plan(cfg)
    t0 = time.time()
    train_set, test_set = make_dataset(cfg["data"], plan.input_bits)
    mask, _ = search_mask(plan, C.mask_search_params(cfg), train_set, cfg["seed"])
    net, _ = train_model(plan, cfg["train"], mask, train_set, cfg["seed"])
    compiled = compile_network(net, config_digest=C.config_digest(cfg))
    return {
        "cfg": cfg,
        "plan": plan,
        "train_set": train_set,
        "test_set": test_set,
        "net": net,
        "compiled": compiled,
        "build_seconds": time.time() - t0,
    }


@pytest.fixture(scope="module")
def digit_trend():
    """Digit-recognition masks, searched vs random: 3 seeds, both arms.

    Runs on the procedural digit surrogate by default; point
    LUTDNN_MNIST_DIR at the four IDX files to run on real MNIST instead.
    """
    cfg = C.load_preset("hdr")
    cfg["model"]["degree"] = 1
    cfg["train"]["epochs"] = 50
    cfg["mask_search"]["epochs"] = 50
    mnist_dir = os.environ.get("LUTDNN_MNIST_DIR")
    if mnist_dir:
        cfg["data"] = {"kind": "mnist", "path": mnist_dir,
                       "train_count": 10000, "test_count": 2000}
    cfg = C.resolve_config(cfg)
    plan = C.model_plan(cfg)
    train_set, test_set = make_dataset(cfg["data"], plan.input_bits)
    t0 = time.time()
    out = {"searched": [], "random": [], "searched_ratio": [], "random_ratio": []}
    for seed in (1, 2, 3):
        for method in ("sparselut", "random"):
            ms = C.mask_search_params(cfg)
            ms["method"] = method
            mask, _ = search_mask(plan, ms, train_set, seed)
            net, _ = train_model(plan, cfg["train"], mask, train_set, seed)
            acc = evaluate_accuracy(net, test_set)
            grid = mask_density_heatmap(mask.layers[0], plan.inputs, 28)
            key = "searched" if method == "sparselut" else "random"
            out[key].append(acc)
            out[key + "_ratio"].append(centrality_ratio(grid))
    out["seconds"] = time.time() - t0
    return out


# --- 1: per-neuron table size formula, exact ---------------------------------


def test_resource_table_cells_exact():
    cells = [
        # (bits, fanin, adders) -> total table entries per neuron
        (2, 6, 1, 1 << 12),
        (2, 6, 2, 2 * (1 << 12) + (1 << 6)),
        (2, 6, 3, 3 * (1 << 12) + (1 << 9)),
        (5, 3, 1, 1 << 15),
        (5, 3, 2, 2 * (1 << 15) + (1 << 12)),
        (3, 4, 1, 1 << 12),
        (3, 4, 2, 2 * (1 << 12) + (1 << 8)),
        (3, 4, 3, 3 * (1 << 12) + (1 << 12)),
    ]
    for bits, fanin, adders, want in cells:
        got = table_entry_counts(bits, fanin, adders)["per_neuron_total"]
        assert got == want, (bits, fanin, adders, got, want)
        plan = ModelPlan(inputs=64, layer_widths=[1], fanin=fanin, bits=bits,
                         degree=1, adders=adders)
        est = estimate_resources(plan)
        assert est["total_entries"] == want, (bits, fanin, adders)


# --- 2: fan-in split identity in real arithmetic ------------------------------


def test_adder_split_identity_real_arithmetic():
    rng = np.random.default_rng(206)
    for _ in range(1000):
        a_cnt = int(rng.integers(1, 5))
        fanin = int(rng.integers(1, 5))
        w = rng.normal(size=a_cnt * fanin)
        b_parts = rng.normal(size=a_cnt)
        x = rng.normal(size=a_cnt * fanin)
        wide = subneuron_values(x, w, b_parts.sum(), 1, "none")
        split = 0.0
        for a in range(a_cnt):
            lo = a * fanin
            split += subneuron_values(x[lo:lo + fanin], w[lo:lo + fanin],
                                      b_parts[a], 1, "none")
        assert abs(wide - split) <= 1e-9 * max(1.0, abs(wide))


# --- 3: table netlist is bit-exact against the trained model ------------------


def test_toy_net_bit_exact_exhaustive_and_random(toy_artifacts):
    t0 = time.time()
    net = toy_artifacts["net"]
    compiled = toy_artifacts["compiled"]
    # every possible input vector: 8 inputs x 2 bits = 16 index bits
    all_codes = unpack_fields(np.arange(1 << 16), 2, 8)
    want = net.eval_codes(all_codes)
    got = lut_eval(compiled, all_codes)
    exhaustive_mismatches = int(np.count_nonzero((want != got).any(axis=1)))
    report = check_equivalence(net, compiled, samples=100_000,
                               seed=toy_artifacts["cfg"]["seed"])
    assert exhaustive_mismatches == 0
    assert report["mismatches"] == 0
    assert report["checked"] >= 100_000
    assert toy_artifacts["build_seconds"] + (time.time() - t0) < 120.0


# --- 4: dense-start search lands every neuron exactly on budget ---------------


def test_fanin_budget_reached_from_dense_start():
    t0 = time.time()
    n_in, rows, steps, switch = 64, 8, 60, 40
    for target in (2, 4, 6):
        for seed in range(20):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([seed, target])))
            p = init_sparse_weights(rows, n_in, init_fanin=n_in, rng=rng)
            h = SparsityHyper(target_fanin=target, lr=0.05, phase_switch=switch)
            relaxed = False
            for step in range(steps):
                grad = rng.normal(0.0, 1.0, size=p.theta.shape)
                p, _ = sparse_update_step(p, grad, h, epoch=step, rng=rng)
                if step < switch and np.any(p.row_counts() != target):
                    relaxed = True
            assert np.all(p.row_counts() == target), (target, seed)
            assert relaxed, (target, seed)
            # extraction re-checks the budget row by row and must not raise
            mask = extract_mask(p, target, 1)
            assert len(mask) == rows
            assert all(len(subs[0]) == target for subs in mask)
    assert time.time() - t0 < 120.0


# --- 5: searched connectivity beats random connectivity on digits -------------


def test_searched_masks_beat_random_on_digits(digit_trend):
    searched = float(np.mean(digit_trend["searched"]))
    random = float(np.mean(digit_trend["random"]))
    assert searched - random >= 0.005, digit_trend
    assert digit_trend["seconds"] <= 1800.0


# --- 6: searched first-layer density concentrates on the image center ---------


def test_searched_mask_density_concentrates_centrally(digit_trend):
    for ratio in digit_trend["searched_ratio"]:
        assert ratio > 1.0, digit_trend["searched_ratio"]
    for ratio in digit_trend["random_ratio"]:
        assert ratio <= 1.1, digit_trend["random_ratio"]


# --- 7: the rewiring baseline never leaves the budget, any step ---------------


def test_rewiring_baseline_conserves_fanin_every_step(toy_artifacts):
    t0 = time.time()
    # kernel level: count checked after every single step
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([3, 7])))
    p = init_sparse_weights(6, 32, init_fanin=4, rng=rng)
    h = SparsityHyper(target_fanin=4, lr=0.05, phase_switch=1)
    total_dropped = 0
    for _ in range(300):
        grad = rng.normal(0.0, 1.0, size=p.theta.shape)
        p, info = deepr_star_step(p, grad, h, rng)
        total_dropped += info["dropped"]
        assert np.all(p.row_counts() == 4)
    assert total_dropped > 0  # rewiring actually happened

    # full run level: per-epoch count extremes over all steps stay pinned
    cfg = toy_artifacts["cfg"]
    plan = toy_artifacts["plan"]
    ms = C.mask_search_params(cfg)
    ms["method"] = "deepr_star"
    _, log = search_mask(plan, ms, toy_artifacts["train_set"], cfg["seed"])
    for entry in log["epochs"]:
        for li, spread in enumerate(entry["pre_maintenance_counts"]):
            assert spread["min"] == plan.fanins[li], entry
            assert spread["max"] == plan.fanins[li], entry
    assert time.time() - t0 < 60.0


# --- 8: emitted Verilog re-parses to the exact same tables --------------------


def test_rtl_round_trip_reparse(toy_artifacts, tmp_path):
    compiled = toy_artifacts["compiled"]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([1, 0x47])))
    vectors = rng.integers(0, 1 << compiled.input_bits,
                           size=(1000, compiled.input_count), dtype=np.int64)
    manifest = write_rtl(compiled, tmp_path, vectors)
    parsed = parse_rtl_dir(tmp_path)
    assert set(parsed) == set(manifest["modules"])
    for name, table in module_tables(compiled):
        back = parsed[name]
        assert back.field_bits == table.field_bits
        assert back.field_count == table.field_count
        assert back.output_bits == table.output_bits
        np.testing.assert_array_equal(back.entries, table.entries)


@pytest.mark.skipif(shutil.which("iverilog") is None,
                    reason="no Verilog simulator on PATH")
def test_rtl_external_simulator(toy_artifacts, tmp_path):
    import subprocess

    compiled = toy_artifacts["compiled"]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([1, 0x47])))
    vectors = rng.integers(0, 1 << compiled.input_bits,
                           size=(1000, compiled.input_count), dtype=np.int64)
    write_rtl(compiled, tmp_path, vectors)
    sources = [str(tmp_path / "tb" / "tb_top.v"), str(tmp_path / "rtl" / "top.v")]
    sources += sorted(str(p) for p in (tmp_path / "rtl" / "neurons").glob("*.v"))
    subprocess.run(["iverilog", "-o", str(tmp_path / "sim")] + sources, check=True)
    run = subprocess.run(["vvp", str(tmp_path / "sim")], check=True,
                         capture_output=True, text=True, cwd=tmp_path / "tb")
    assert "ALL 1000 VECTORS PASS" in run.stdout


# --- 9: same seed, same bytes --------------------------------------------------


def test_same_seed_pipeline_byte_identical(tmp_path):
    cfg = C.load_preset("toy")
    cfg["train"]["epochs"] = 20
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for stage in (["train-mask"], ["train"], ["compile"],
                      ["emit-rtl", "--samples", "64"]):
            code = cli.main(stage + ["--config", str(cfg_path), "--out", str(out)])
            assert code == 0, stage
        outs.append(out)
    a, b = outs

    def blob(root, rel):
        return (root / rel).read_bytes()

    for rel in ("mask.json", "model.ckpt", "net.lutnet",
                "rtl/top.v", "tb/vectors.hex", "tb/tb_top.v"):
        assert blob(a, rel) == blob(b, rel), rel
    mods_a = sorted(p.name for p in (a / "rtl" / "neurons").glob("*.v"))
    mods_b = sorted(p.name for p in (b / "rtl" / "neurons").glob("*.v"))
    assert mods_a == mods_b and mods_a
    for name in mods_a:
        assert blob(a, f"rtl/neurons/{name}") == blob(b, f"rtl/neurons/{name}"), name
