"""Enumerate trained neurons into truth tables and package the netlist.

Enumeration feeds every possible input-code tuple through the same kernel
functions the model's eval path uses (`neurons.subneuron_values`,
`neurons.adder_combine`, the quantizers), so a table entry is the model's
own answer for that input, not a reimplementation of it.

The on-disk `.lutnet` container is a little-endian binary laid out in
docs/formats.md; tables appear in layer, then neuron, then sub-neuron
order, and the header carries the config digest so downstream stages can
refuse mismatched artifacts.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import neurons as nrn
from .network import QuantizedNet
from .nn import apply_activation
from .quant import QuantSpec, dequantize, quantize

__all__ = [
    "TruthTable",
    "CompiledNeuron",
    "CompiledLayer",
    "CompiledNet",
    "pack_fields",
    "unpack_fields",
    "enumerate_subneuron_table",
    "enumerate_adder_table",
    "enumerate_single_table",
    "compile_network",
    "estimate_resources",
    "save_lutnet",
    "load_lutnet",
]

_ENUM_CHUNK = 1 << 16


@dataclass(frozen=True)
class TruthTable:
    """One lookup table: packed input index -> raw output code.

    The index concatenates the input fields with field 0 in the most
    significant position; each field is `field_bits` wide. Entries are
    unsigned output codes, `output_bits` wide.
    """

    field_bits: int
    field_count: int
    output_bits: int
    entries: np.ndarray

    def __post_init__(self):
        want = 1 << (self.field_bits * self.field_count)
        if self.entries.shape != (want,):
            raise ValueError(f"{self.entries.shape[0]} entries, want {want}")
        if self.entries.min() < 0 or self.entries.max() >= (1 << self.output_bits):
            raise ValueError("entry outside the output code range")

    @property
    def index_bits(self) -> int:
        return self.field_bits * self.field_count

    def lookup(self, packed_index):
        return self.entries[np.asarray(packed_index)]


@dataclass(frozen=True)
class CompiledNeuron:
    selected: np.ndarray  # (adders, fanin) int64 input indices per sub-neuron
    sub_tables: tuple  # tuple[TruthTable, ...], one per sub-neuron
    adder_table: TruthTable | None  # None when adders == 1


@dataclass(frozen=True)
class CompiledLayer:
    in_count: int
    out_count: int
    fanin: int
    degree: int
    adders: int
    in_bits: int
    mid_bits: int
    out_bits: int
    activation: str
    in_spec: QuantSpec
    mid_spec: QuantSpec | None
    out_spec: QuantSpec
    neurons: tuple  # tuple[CompiledNeuron, ...]


@dataclass(frozen=True)
class CompiledNet:
    layers: tuple
    config_digest: str

    @property
    def input_count(self) -> int:
        return self.layers[0].in_count

    @property
    def input_bits(self) -> int:
        return self.layers[0].in_bits

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_count


def pack_fields(codes, bits: int):
    """Concatenate code fields into table indices; field 0 most significant."""
    codes = np.asarray(codes, dtype=np.int64)
    acc = codes[..., 0].copy()
    for k in range(1, codes.shape[-1]):
        acc = (acc << bits) | codes[..., k]
    return acc


def unpack_fields(index, bits: int, count: int):
    """Inverse of pack_fields: (...,) indices -> (..., count) code fields."""
    index = np.asarray(index, dtype=np.int64)
    mask = (1 << bits) - 1
    fields = [(index >> (bits * (count - 1 - k))) & mask for k in range(count)]
    return np.stack(fields, axis=-1)


def _check_cap(index_bits: int, cap_bits: int, what: str) -> None:
    if index_bits > cap_bits:
        raise ValueError(
            f"{what} needs a 2^{index_bits}-entry table, over the 2^{cap_bits} "
            f"enumeration cap; lower fan-in/bits or raise the cap"
        )


def enumerate_subneuron_table(sub: nrn.PolyNeuron, in_spec: QuantSpec,
                              mid_spec: QuantSpec, activation: str,
                              cap_bits: int = 24) -> TruthTable:
    """Sub-neuron table: in_spec codes^fanin -> mid_spec code."""
    fanin = len(sub.selected_inputs)
    index_bits = in_spec.bits * fanin
    _check_cap(index_bits, cap_bits, "sub-neuron")
    total = 1 << index_bits
    entries = np.empty(total, dtype=np.int64)
    for lo in range(0, total, _ENUM_CHUNK):
        idx = np.arange(lo, min(lo + _ENUM_CHUNK, total), dtype=np.int64)
        z = dequantize(unpack_fields(idx, in_spec.bits, fanin), in_spec)
        vals = nrn.subneuron_values(z, sub.weights, sub.bias, sub.degree, activation)
        entries[lo:lo + idx.size] = quantize(vals, mid_spec)
    return TruthTable(in_spec.bits, fanin, mid_spec.bits, entries)


def enumerate_adder_table(neuron: nrn.AddNeuron, cap_bits: int = 24) -> TruthTable:
    """Adder-stage table: mid codes^adders -> out_spec code."""
    if neuron.mid_spec is None:
        raise ValueError("adder table only exists for multi-sub neurons")
    adders = len(neuron.subs)
    index_bits = neuron.mid_spec.bits * adders
    _check_cap(index_bits, cap_bits, "adder stage")
    total = 1 << index_bits
    entries = np.empty(total, dtype=np.int64)
    for lo in range(0, total, _ENUM_CHUNK):
        idx = np.arange(lo, min(lo + _ENUM_CHUNK, total), dtype=np.int64)
        mids = unpack_fields(idx, neuron.mid_spec.bits, adders)
        s = nrn.adder_combine(mids, neuron.mid_spec)
        y = apply_activation(neuron.bn_scale * s + neuron.bn_shift, neuron.activation)
        entries[lo:lo + idx.size] = quantize(y, neuron.out_spec)
    return TruthTable(neuron.mid_spec.bits, adders, neuron.out_spec.bits, entries)


def enumerate_single_table(neuron: nrn.AddNeuron, cap_bits: int = 24) -> TruthTable:
    """Whole-neuron table for the single-sub case: in codes^fanin -> out code."""
    if neuron.mid_spec is not None:
        raise ValueError("single-table form requires exactly one sub-neuron")
    sub = neuron.subs[0]
    fanin = len(sub.selected_inputs)
    index_bits = neuron.in_spec.bits * fanin
    _check_cap(index_bits, cap_bits, "neuron")
    total = 1 << index_bits
    entries = np.empty(total, dtype=np.int64)
    for lo in range(0, total, _ENUM_CHUNK):
        idx = np.arange(lo, min(lo + _ENUM_CHUNK, total), dtype=np.int64)
        z = dequantize(unpack_fields(idx, neuron.in_spec.bits, fanin), neuron.in_spec)
        pre = nrn.poly_neuron_forward(sub, z)
        y = apply_activation(neuron.bn_scale * pre + neuron.bn_shift, neuron.activation)
        entries[lo:lo + idx.size] = quantize(y, neuron.out_spec)
    return TruthTable(neuron.in_spec.bits, fanin, neuron.out_spec.bits, entries)


def _compile_neuron(neuron: nrn.AddNeuron, cap_bits: int) -> CompiledNeuron:
    selected = np.asarray([list(s.selected_inputs) for s in neuron.subs], dtype=np.int64)
    if neuron.mid_spec is None:
        return CompiledNeuron(
            selected=selected,
            sub_tables=(enumerate_single_table(neuron, cap_bits),),
            adder_table=None,
        )
    subs = tuple(
        enumerate_subneuron_table(s, neuron.in_spec, neuron.mid_spec,
                                  neuron.activation, cap_bits)
        for s in neuron.subs
    )
    return CompiledNeuron(
        selected=selected,
        sub_tables=subs,
        adder_table=enumerate_adder_table(neuron, cap_bits),
    )


def _compile_neuron_task(args):
    neuron, cap_bits = args
    return _compile_neuron(neuron, cap_bits)


def compile_network(net: QuantizedNet, config_digest: str = "",
                    cap_bits: int = 24, workers: int | None = None) -> CompiledNet:
    """Enumerate every neuron of a calibrated network.

    workers > 1 fans neurons out over processes (set via the
    LUTDNN_WORKERS environment variable when the argument is None);
    results are collected in neuron order either way, so the artifact does
    not depend on the worker count.
    """
    if workers is None:
        workers = int(os.environ.get("LUTDNN_WORKERS", "1"))
    layers = []
    for layer in net.layers:
        if layer.in_spec is None or layer.out_spec is None:
            raise ValueError("network must be calibrated before compilation")
        neuron_views = [layer.neuron(o) for o in range(layer.out_count)]
        if workers > 1 and layer.out_count > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                compiled = list(pool.map(
                    _compile_neuron_task, [(nv, cap_bits) for nv in neuron_views],
                    chunksize=max(1, layer.out_count // (workers * 4)),
                ))
        else:
            compiled = [_compile_neuron(nv, cap_bits) for nv in neuron_views]
        layers.append(CompiledLayer(
            in_count=layer.in_count, out_count=layer.out_count, fanin=layer.fanin,
            degree=layer.degree, adders=layer.adders,
            in_bits=layer.in_spec.bits,
            mid_bits=layer.mid_spec.bits if layer.mid_spec else 0,
            out_bits=layer.out_spec.bits,
            activation=layer.activation,
            in_spec=layer.in_spec, mid_spec=layer.mid_spec, out_spec=layer.out_spec,
            neurons=tuple(compiled),
        ))
    return CompiledNet(layers=tuple(layers), config_digest=config_digest)


def table_entry_counts(bits: int, fanin: int, adders: int, in_bits: int | None = None):
    """Per-neuron entry counts for a (bits, fanin, adders) layer shape.

    Returns dict with sub/adder/total entry counts plus the count a
    monolithic single-table neuron of the same reach would need.
    """
    bi = in_bits if in_bits is not None else bits
    sub_entries = 1 << (bi * fanin)
    adder_entries = (1 << (adders * (bits + 1))) if adders > 1 else 0
    return {
        "sub_entries": sub_entries,
        "sub_tables": adders,
        "adder_entries": adder_entries,
        "per_neuron_total": adders * sub_entries + adder_entries,
        "monolithic_entries": 1 << (bi * fanin * adders),
    }


def estimate_resources(plan) -> dict:
    """Entry-count budget for a model plan (no trained weights needed)."""
    layers = []
    total = 0
    total_monolithic = 0
    for li, (n_in, width, fanin) in enumerate(
        zip(plan.in_counts, plan.layer_widths, plan.fanins)
    ):
        in_bits = plan.input_bits if li == 0 else plan.bits
        counts = table_entry_counts(plan.bits, fanin, plan.adders, in_bits=in_bits)
        layer_total = width * counts["per_neuron_total"]
        total += layer_total
        total_monolithic += width * counts["monolithic_entries"]
        layers.append({
            "layer": li,
            "in_count": n_in,
            "neurons": width,
            "fanin": fanin,
            "in_bits": in_bits,
            "out_bits": plan.bits,
            **counts,
            "layer_total": layer_total,
        })
    return {
        "layers": layers,
        "total_entries": total,
        "total_monolithic_entries": total_monolithic,
    }


# --- .lutnet container -------------------------------------------------------

_LUTNET_MAGIC = b"LUTNET\0\n"
_LUTNET_VERSION = 1
_ACT_CODES = {"none": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def _entry_dtype(output_bits: int):
    if output_bits <= 8:
        return np.dtype("<u1")
    if output_bits <= 16:
        return np.dtype("<u2")
    raise ValueError(f"table output width {output_bits} over 16 bits")


def _pack_spec(spec: QuantSpec | None) -> bytes:
    if spec is None:
        return struct.pack("<BBdq", 0, 0, 0.0, 0)
    return struct.pack("<BBdq", spec.bits, int(spec.signed), spec.scale, spec.zero_point)


def _unpack_spec(blob: bytes) -> QuantSpec | None:
    bits, signed, scale, zp = struct.unpack("<BBdq", blob)
    if bits == 0:
        return None
    return QuantSpec(bits=bits, signed=bool(signed), scale=scale, zero_point=zp)


_SPEC_SIZE = struct.calcsize("<BBdq")
_LAYER_HDR = "<IIIIIIIIBBH"
_LAYER_HDR_SIZE = struct.calcsize(_LAYER_HDR)


def save_lutnet(net: CompiledNet, path) -> None:
    chunks = [_LUTNET_MAGIC, struct.pack("<I", _LUTNET_VERSION)]
    digest = bytes.fromhex(net.config_digest) if net.config_digest else b"\0" * 32
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes of hex")
    chunks.append(digest)
    chunks.append(struct.pack("<IIII", net.input_count, net.input_bits,
                              net.class_count, len(net.layers)))
    for layer in net.layers:
        chunks.append(struct.pack(
            _LAYER_HDR,
            layer.out_count, layer.in_count, layer.adders, layer.fanin, layer.degree,
            layer.in_bits, layer.mid_bits, layer.out_bits,
            _ACT_CODES[layer.activation], 1 if layer.adders > 1 else 0, 0,
        ))
        chunks.append(_pack_spec(layer.in_spec))
        chunks.append(_pack_spec(layer.mid_spec))
        chunks.append(_pack_spec(layer.out_spec))
        for neuron in layer.neurons:
            chunks.append(neuron.selected.astype("<u4").tobytes(order="C"))
            for table in neuron.sub_tables:
                chunks.append(table.entries.astype(_entry_dtype(table.output_bits)).tobytes())
            if neuron.adder_table is not None:
                table = neuron.adder_table
                chunks.append(table.entries.astype(_entry_dtype(table.output_bits)).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_lutnet(path) -> CompiledNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"truncated netlist: need {n} bytes at offset {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(8) != _LUTNET_MAGIC:
        raise ValueError(f"not a table netlist: bad magic in {path}")
    version = struct.unpack("<I", take(4))[0]
    if version != _LUTNET_VERSION:
        raise ValueError(f"unsupported netlist version {version}")
    digest = take(32)
    config_digest = "" if digest == b"\0" * 32 else digest.hex()
    input_count, input_bits, class_count, layer_count = struct.unpack("<IIII", take(16))
    layers = []
    for _ in range(layer_count):
        (out_count, in_count, adders, fanin, degree, in_bits, mid_bits, out_bits,
         act_code, has_adder, _pad) = struct.unpack(_LAYER_HDR, take(_LAYER_HDR_SIZE))
        in_spec = _unpack_spec(take(_SPEC_SIZE))
        mid_spec = _unpack_spec(take(_SPEC_SIZE))
        out_spec = _unpack_spec(take(_SPEC_SIZE))
        neurons = []
        sub_out_bits = mid_bits if has_adder else out_bits
        sub_dtype = _entry_dtype(sub_out_bits)
        sub_len = 1 << (in_bits * fanin)
        for _ in range(out_count):
            selected = np.frombuffer(take(4 * adders * fanin), dtype="<u4")
            selected = selected.reshape(adders, fanin).astype(np.int64)
            subs = []
            for _ in range(adders):
                raw = np.frombuffer(take(sub_len * sub_dtype.itemsize), dtype=sub_dtype)
                subs.append(TruthTable(in_bits, fanin, sub_out_bits,
                                       raw.astype(np.int64)))
            adder_table = None
            if has_adder:
                alen = 1 << (mid_bits * adders)
                adt = _entry_dtype(out_bits)
                raw = np.frombuffer(take(alen * adt.itemsize), dtype=adt)
                adder_table = TruthTable(mid_bits, adders, out_bits, raw.astype(np.int64))
            neurons.append(CompiledNeuron(selected=selected, sub_tables=tuple(subs),
                                          adder_table=adder_table))
        layers.append(CompiledLayer(
            in_count=in_count, out_count=out_count, fanin=fanin, degree=degree,
            adders=adders, in_bits=in_bits, mid_bits=mid_bits, out_bits=out_bits,
            activation=_ACT_NAMES[act_code],
            in_spec=in_spec, mid_spec=mid_spec, out_spec=out_spec,
            neurons=tuple(neurons),
        ))
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes after netlist payload")
    net = CompiledNet(layers=tuple(layers), config_digest=config_digest)
    if net.input_count != input_count or net.input_bits != input_bits \
            or net.class_count != class_count:
        raise ValueError("netlist header disagrees with layer payload")
    return net
