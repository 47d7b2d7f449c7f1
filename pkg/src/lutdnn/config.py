"""Run configuration: defaults, validation, digests, and shipped presets.

A config is plain JSON with four sections (model, mask_search, train,
data) plus a top-level seed. `resolve_config` fills defaults and
validates; the sha256 of the resolved canonical JSON is the digest that
chains pipeline artifacts together, so any config drift between stages is
caught instead of silently mixing artifacts.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources as importlib_resources

from .serialize import canonical_json
from .training import ModelPlan

__all__ = [
    "ConfigError",
    "resolve_config",
    "load_config",
    "config_digest",
    "model_plan",
    "preset_names",
    "load_preset",
]


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


_MODEL_DEFAULTS = {
    "degree": 1,
    "adders": 1,
    "input_bits": None,  # None -> model.bits
    "input_fanin": None,  # None -> model.fanin
}

_MASK_DEFAULTS = {
    "method": "sparselut",
    "epochs": 30,
    "batch_size": 128,
    "lr": 0.05,
    "phase_switch_fraction": 0.8,
    "eps1": 1e-12,
    "eps2": 5e-5,
    "alpha": 1e-4,
    "noise_std": None,  # None -> 1e-5 / lr
    "init_fanin": None,  # None -> dense start
    "maintenance_interval": 1,
}

_TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch_size": 128,
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "calibration_samples": 2048,
}

_DATA_DEFAULTS = {
    "kind": "synth",
    "path": None,
    "train_count": 4000,
    "test_count": 1000,
    "features": 16,
    "classes": 5,
    "separability": 2.0,
    "seed": 0,
}

_TOP_DEFAULTS = {
    "name": "run",
    "seed": 1,
    "enumeration_cap_bits": 24,
}


def _merge(section: dict, defaults: dict, where: str) -> dict:
    out = dict(defaults)
    for key, val in section.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}.{key}")
        out[key] = val
    return out


def resolve_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"name", "seed", "enumeration_cap_bits",
                          "model", "mask_search", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    model_raw = raw.get("model")
    if not isinstance(model_raw, dict):
        raise ConfigError("config needs a model section")
    for req in ("inputs", "layers", "bits", "fanin"):
        if req not in model_raw:
            raise ConfigError(f"model.{req} is required")
    model = dict(_MODEL_DEFAULTS)
    for key, val in model_raw.items():
        if key not in ("inputs", "layers", "bits", "fanin", *_MODEL_DEFAULTS):
            raise ConfigError(f"unknown key model.{key}")
        model[key] = val
    cfg = {
        "name": str(raw.get("name", _TOP_DEFAULTS["name"])),
        "seed": int(raw.get("seed", _TOP_DEFAULTS["seed"])),
        "enumeration_cap_bits": int(
            raw.get("enumeration_cap_bits", _TOP_DEFAULTS["enumeration_cap_bits"])
        ),
        "model": model,
        "mask_search": _merge(raw.get("mask_search", {}), _MASK_DEFAULTS, "mask_search"),
        "train": _merge(raw.get("train", {}), _TRAIN_DEFAULTS, "train"),
        "data": _merge(raw.get("data", {}), _DATA_DEFAULTS, "data"),
    }
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    m = cfg["model"]
    if not isinstance(m["layers"], list) or not m["layers"]:
        raise ConfigError("model.layers must be a non-empty list of widths")
    if any(int(w) < 1 for w in m["layers"]):
        raise ConfigError("layer widths must be positive")
    m["layers"] = [int(w) for w in m["layers"]]
    for key in ("inputs", "bits", "fanin", "degree", "adders"):
        m[key] = int(m[key])
        if m[key] < 1:
            raise ConfigError(f"model.{key} must be >= 1")
    if m["bits"] > 8:
        raise ConfigError("model.bits over 8 is outside the intended table regime")
    for key in ("input_bits", "input_fanin"):
        if m[key] is not None:
            m[key] = int(m[key])
            if m[key] < 1:
                raise ConfigError(f"model.{key} must be >= 1 when given")
    ms = cfg["mask_search"]
    if ms["method"] not in ("sparselut", "deepr_star", "random"):
        raise ConfigError(f"mask_search.method {ms['method']!r} unknown")
    for key in ("epochs", "batch_size", "maintenance_interval"):
        ms[key] = int(ms[key])
        if ms[key] < 1:
            raise ConfigError(f"mask_search.{key} must be >= 1")
    if not 0.0 < float(ms["phase_switch_fraction"]) <= 1.0:
        raise ConfigError("mask_search.phase_switch_fraction must be in (0, 1]")
    tr = cfg["train"]
    for key in ("epochs", "batch_size", "calibration_samples"):
        tr[key] = int(tr[key])
        if tr[key] < 1:
            raise ConfigError(f"train.{key} must be >= 1")
    d = cfg["data"]
    if d["kind"] not in ("mnist", "jsc", "synth", "synth_digits"):
        raise ConfigError(f"data.kind {d['kind']!r} unknown")
    try:
        plan = model_plan(cfg)
        plan.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cap = cfg["enumeration_cap_bits"]
    in_bits = plan.input_bits
    widths = [(in_bits * plan.input_fanin, "first-layer table")]
    widths.append((plan.bits * plan.fanin, "hidden-layer table"))
    if plan.adders > 1:
        widths.append((plan.adders * (plan.bits + 1), "adder table"))
    for bits, what in widths:
        if bits > cap:
            raise ConfigError(
                f"{what} index is {bits} bits, over the {cap}-bit enumeration cap"
            )


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(raw)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def model_plan(cfg: dict) -> ModelPlan:
    m = cfg["model"]
    return ModelPlan(
        inputs=m["inputs"], layer_widths=m["layers"], fanin=m["fanin"], bits=m["bits"],
        degree=m["degree"], adders=m["adders"],
        input_bits=m["input_bits"], input_fanin=m["input_fanin"],
    )


def mask_search_params(cfg: dict) -> dict:
    """The mask-search section with phase_switch resolved to epochs."""
    ms = dict(cfg["mask_search"])
    ms["phase_switch"] = max(1, int(round(ms["phase_switch_fraction"] * ms["epochs"])))
    return ms


def preset_names():
    files = importlib_resources.files("lutdnn").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = importlib_resources.files("lutdnn").joinpath("presets", f"{name}.json")
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"no preset named {name!r}; have {preset_names()}") from exc
    return resolve_config(json.loads(text))
