"""Command-line pipeline: train-mask -> train -> compile -> emit-rtl -> simulate -> report.

Each stage reads its prerequisites from the run directory (--out), writes
its artifacts there, and records digests in manifest.json. Stages verify
the config digest chain, so artifacts from different configs cannot be
mixed silently.

Exit codes: 0 success, 2 config/usage error, 3 mask search failed to
converge, 4 equivalence mismatch, 5 missing prerequisite artifact,
1 unexpected failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .compiler import compile_network, estimate_resources, load_lutnet, save_lutnet
from .data import make_dataset
from .network import QuantizedNet
from .rtl import module_tables, parse_rtl_dir, write_rtl
from .sim import check_equivalence, evaluate_accuracy
from .sparsity import ConnectivityMask, centrality_ratio, mask_density_heatmap
from .training import search_mask, train_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_EQUIVALENCE = 4
EXIT_MISSING = 5

_MASK_FILE = "mask.json"
_CKPT_FILE = "model.ckpt"
_NET_FILE = "net.lutnet"


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _update_manifest(outdir, stage: str, digest: str, outputs) -> None:
    path = os.path.join(outdir, "manifest.json")
    manifest = {"config_digest": digest, "stages": {}}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        manifest["config_digest"] = digest
        manifest.setdefault("stages", {})
    manifest["stages"][stage] = {
        "outputs": {os.path.basename(p): _sha256_file(p) for p in outputs},
    }
    _write_json(path, manifest)


def _load_run_config(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    if getattr(args, "method", None) is not None:
        cfg["mask_search"]["method"] = args.method
    if getattr(args, "epochs_override", None) is not None:
        cfg["mask_search"]["epochs"] = int(args.epochs_override)
        cfg["train"]["epochs"] = int(args.epochs_override)
    return cfgmod.resolve_config(cfg)


def _need(outdir, fname: str, producer: str) -> str:
    path = os.path.join(outdir, fname)
    if not os.path.exists(path):
        raise PrereqMissing(f"{path} not found; run `lutdnn {producer}` first")
    return path


class PrereqMissing(RuntimeError):
    pass


def cmd_train_mask(args) -> int:
    cfg = _load_run_config(args)
    digest = cfgmod.config_digest(cfg)
    plan = cfgmod.model_plan(cfg)
    train_set, _ = make_dataset(cfg["data"], plan.input_bits)
    _say(f"[train-mask] method={cfg['mask_search']['method']} "
         f"epochs={cfg['mask_search']['epochs']} seed={cfg['seed']}")
    try:
        mask, log = search_mask(plan, cfgmod.mask_search_params(cfg), train_set, cfg["seed"])
    except ValueError as exc:
        _say(f"[train-mask] search did not converge to the fan-in budget: {exc}")
        return EXIT_CONVERGENCE
    os.makedirs(args.out, exist_ok=True)
    mask_path = os.path.join(args.out, _MASK_FILE)
    mask.save(mask_path)
    log_path = os.path.join(args.out, "mask_log.json")
    _write_json(log_path, log)
    _update_manifest(args.out, "train-mask", digest, [mask_path, log_path])
    _say(f"[train-mask] wrote {mask_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    digest = cfgmod.config_digest(cfg)
    plan = cfgmod.model_plan(cfg)
    mask_path = args.mask or _need(args.out, _MASK_FILE, "train-mask")
    if args.mask and not os.path.exists(args.mask):
        raise PrereqMissing(f"{args.mask} not found; run `lutdnn train-mask` first")
    mask = ConnectivityMask.load(mask_path)
    train_set, test_set = make_dataset(cfg["data"], plan.input_bits)
    _say(f"[train] epochs={cfg['train']['epochs']} seed={cfg['seed']}")
    net, log = train_model(plan, cfg["train"], mask, train_set, cfg["seed"])
    log["train_accuracy"] = evaluate_accuracy(net, train_set)
    log["test_accuracy"] = evaluate_accuracy(net, test_set)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, _CKPT_FILE)
    net.save(ckpt_path, config_digest=digest)
    log_path = os.path.join(args.out, "train_log.json")
    _write_json(log_path, log)
    _update_manifest(args.out, "train", digest, [ckpt_path, log_path])
    _say(f"[train] test accuracy {log['test_accuracy']:.4f}; wrote {ckpt_path}")
    return EXIT_OK


def _load_checkpoint(args, cfg) -> QuantizedNet:
    digest = cfgmod.config_digest(cfg)
    ckpt_path = _need(args.out, _CKPT_FILE, "train")
    net = QuantizedNet.load(ckpt_path)
    stored = net.config_digest_of(ckpt_path)
    if stored and stored != digest:
        raise cfgmod.ConfigError(
            f"checkpoint {ckpt_path} was trained under config digest {stored[:12]}..., "
            f"current config is {digest[:12]}..."
        )
    return net


def cmd_compile(args) -> int:
    cfg = _load_run_config(args)
    digest = cfgmod.config_digest(cfg)
    net = _load_checkpoint(args, cfg)
    plan = cfgmod.model_plan(cfg)
    _say(f"[compile] enumerating tables (cap 2^{cfg['enumeration_cap_bits']})")
    compiled = compile_network(net, config_digest=digest,
                               cap_bits=cfg["enumeration_cap_bits"])
    net_path = os.path.join(args.out, _NET_FILE)
    save_lutnet(compiled, net_path)
    estimate = estimate_resources(plan)
    actual_layers = []
    for layer in compiled.layers:
        per_neuron = sum(t.entries.size for t in layer.neurons[0].sub_tables)
        if layer.neurons[0].adder_table is not None:
            per_neuron += layer.neurons[0].adder_table.entries.size
        actual_layers.append({
            "neurons": layer.out_count,
            "per_neuron_total": per_neuron,
            "layer_total": per_neuron * layer.out_count,
        })
    actual_total = sum(l["layer_total"] for l in actual_layers)
    resources = {
        "estimate": estimate,
        "actual": {"layers": actual_layers, "total_entries": actual_total},
        "estimate_matches_actual": actual_total == estimate["total_entries"],
    }
    res_path = os.path.join(args.out, "resources.json")
    _write_json(res_path, resources)
    _update_manifest(args.out, "compile", digest, [net_path, res_path])
    _say(f"[compile] {actual_total} table entries; wrote {net_path}")
    return EXIT_OK


def cmd_emit_rtl(args) -> int:
    cfg = _load_run_config(args)
    digest = cfgmod.config_digest(cfg)
    net_path = _need(args.out, _NET_FILE, "compile")
    compiled = load_lutnet(net_path)
    if compiled.config_digest and compiled.config_digest != digest:
        raise cfgmod.ConfigError(
            f"netlist {net_path} belongs to config digest {compiled.config_digest[:12]}..."
        )
    samples = args.samples if args.samples is not None else 256
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 0x47])))
    vectors = rng.integers(0, 1 << compiled.input_bits,
                           size=(samples, compiled.input_count), dtype=np.int64)
    manifest = write_rtl(compiled, args.out, vectors)
    # round-trip check: every emitted case statement must parse back to its table
    parsed = parse_rtl_dir(args.out)
    for name, table in module_tables(compiled):
        back = parsed.get(name)
        if back is None or not np.array_equal(back.entries, table.entries) \
                or back.field_bits != table.field_bits \
                or back.field_count != table.field_count:
            raise RuntimeError(f"round-trip parse of {name} disagrees with its table")
    files = [os.path.join(args.out, f) for f in manifest["files"]]
    _update_manifest(args.out, "emit-rtl", digest, files)
    _say(f"[emit-rtl] wrote {len(manifest['modules'])} table modules + top + testbench")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    digest = cfgmod.config_digest(cfg)
    net = _load_checkpoint(args, cfg)
    net_path = _need(args.out, _NET_FILE, "compile")
    compiled = load_lutnet(net_path)
    if compiled.config_digest and compiled.config_digest != digest:
        raise cfgmod.ConfigError(
            f"netlist {net_path} belongs to config digest {compiled.config_digest[:12]}..."
        )
    plan = cfgmod.model_plan(cfg)
    samples = args.samples if args.samples is not None else 100_000
    _say(f"[simulate] equivalence over {samples} random + boundary vectors")
    report = check_equivalence(net, compiled, samples=samples, seed=cfg["seed"])
    eq_path = os.path.join(args.out, "equivalence.json")
    _write_json(eq_path, report)
    train_set, test_set = make_dataset(cfg["data"], plan.input_bits)
    acc = {
        "model_test_accuracy": evaluate_accuracy(net, test_set),
        "tables_test_accuracy": evaluate_accuracy(compiled, test_set),
        "model_train_accuracy": evaluate_accuracy(net, train_set),
    }
    acc_path = os.path.join(args.out, "accuracy.json")
    _write_json(acc_path, acc)
    _update_manifest(args.out, "simulate", digest, [eq_path, acc_path])
    if report["mismatches"]:
        _say(f"[simulate] EQUIVALENCE FAILED: {report['mismatches']} of "
             f"{report['checked']} vectors, first at {report['first_mismatch']}")
        return EXIT_EQUIVALENCE
    _say(f"[simulate] equivalent on all {report['checked']} vectors; "
         f"tables test accuracy {acc['tables_test_accuracy']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_run_config(args)
    digest = cfgmod.config_digest(cfg)
    plan = cfgmod.model_plan(cfg)
    report = {
        "name": cfg["name"],
        "config_digest": digest,
        "resources": estimate_resources(plan),
    }
    for fname, key in (("resources.json", "compiled"), ("equivalence.json", "equivalence"),
                       ("accuracy.json", "accuracy")):
        path = os.path.join(args.out, fname)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                report[key] = json.load(fh)
    mask_path = os.path.join(args.out, _MASK_FILE)
    if os.path.exists(mask_path):
        mask = ConnectivityMask.load(mask_path)
        side = int(round(plan.inputs ** 0.5))
        if side * side == plan.inputs:
            grid = mask_density_heatmap(mask.layers[0], plan.inputs, side)
            report["first_layer_density"] = {
                "heatmap": [[float(v) for v in row] for row in grid],
                "centrality_ratio": centrality_ratio(grid),
            }
    report_path = os.path.join(args.out, "report.json")
    _write_json(report_path, report)
    _update_manifest(args.out, "report", digest, [report_path])
    total = report["resources"]["total_entries"]
    print(f"{cfg['name']}: {total} table entries "
          f"(monolithic {report['resources']['total_monolithic_entries']})")
    if "accuracy" in report:
        print(f"model test accuracy:  {report['accuracy']['model_test_accuracy']:.4f}")
        print(f"tables test accuracy: {report['accuracy']['tables_test_accuracy']:.4f}")
    if "equivalence" in report:
        eq = report["equivalence"]
        verdict = "PASS" if eq["mismatches"] == 0 else "FAIL"
        print(f"equivalence: {verdict} ({eq['checked']} vectors, {eq['mismatches']} mismatches)")
    if "first_layer_density" in report:
        print(f"first-layer centrality ratio: "
              f"{report['first_layer_density']['centrality_ratio']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lutdnn",
        description="Train fan-in limited quantized nets and compile them to lookup tables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_seed=True):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", required=True, help="run directory for artifacts")
        if needs_seed:
            p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("train-mask", help="search the fixed fan-in connectivity")
    common(p)
    p.add_argument("--method", choices=["sparselut", "deepr_star", "random"], default=None)
    p.add_argument("--epochs-override", type=int, default=None)
    p.set_defaults(func=cmd_train_mask)

    p = sub.add_parser("train", help="quantization-aware training at a fixed mask")
    common(p)
    p.add_argument("--mask", default=None, help="mask file (default: <out>/mask.json)")
    p.add_argument("--epochs-override", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compile", help="enumerate all neurons into lookup tables")
    common(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("emit-rtl", help="write Verilog for the compiled netlist")
    common(p)
    p.add_argument("--samples", type=int, default=None, help="testbench vector count")
    p.set_defaults(func=cmd_emit_rtl)

    p = sub.add_parser("simulate", help="bit-exact equivalence + accuracy of the tables")
    common(p)
    p.add_argument("--samples", type=int, default=None, help="random vectors (default 100000)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="aggregate run artifacts into report.json")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except PrereqMissing as exc:
        _say(str(exc))
        return EXIT_MISSING
    except FileNotFoundError as exc:
        _say(f"missing file: {exc}")
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
