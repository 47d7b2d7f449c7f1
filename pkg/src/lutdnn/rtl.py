"""Verilog emission for the table netlist, plus a round-trip parser.

Every table becomes a combinational module holding a full case statement;
the top module wires them per the mask and inserts one register stage per
layer. Codes ride the buses exactly as the simulator packs them: input 0
(or neuron 0) in the most significant field. A small parser reads the
emitted case statements back into TruthTable objects so the round trip
can be asserted without an external simulator; the self-checking
testbench covers the wiring when a simulator is available.
"""

from __future__ import annotations

import os
import re

import numpy as np

from .compiler import CompiledNet, TruthTable
from .sim import lut_eval

__all__ = [
    "emit_neuron_module",
    "emit_top",
    "module_tables",
    "emit_testbench",
    "format_vectors",
    "write_rtl",
    "parse_table_module",
    "parse_rtl_dir",
]


def _hex_digits(bits: int) -> int:
    return (bits + 3) // 4


def emit_neuron_module(table: TruthTable, name: str) -> str:
    """One combinational lookup module with an exhaustive case statement."""
    in_bits = table.index_bits
    out_bits = table.output_bits
    ind = _hex_digits(in_bits)
    outd = _hex_digits(out_bits)
    lines = [
        f"// lut {name}: fields={table.field_count} field_bits={table.field_bits} "
        f"output_bits={out_bits}",
        f"module {name} (",
        f"    input  wire [{in_bits - 1}:0] in,",
        f"    output reg  [{out_bits - 1}:0] out",
        ");",
        "    always @* begin",
        "        case (in)",
    ]
    for idx, val in enumerate(table.entries):
        lines.append(
            f"            {in_bits}'h{idx:0{ind}x}: out = {out_bits}'h{int(val):0{outd}x};"
        )
    lines.append(f"            default: out = {out_bits}'h{0:0{outd}x};")
    lines.extend(["        endcase", "    end", "endmodule", ""])
    return "\n".join(lines)


def _slice(feature: int, count: int, bits: int) -> str:
    """Bus slice for one field under the most-significant-first layout."""
    hi = (count - feature) * bits - 1
    lo = (count - feature - 1) * bits
    return f"[{hi}:{lo}]"


def emit_top(net: CompiledNet) -> str:
    """Pipelined top module: one register stage after each layer."""
    in_w = net.input_count * net.input_bits
    out_w = net.class_count * net.layers[-1].out_bits
    lines = [
        "// pipelined table network; latency = one clock per layer "
        f"({len(net.layers)} cycles)",
        "module top (",
        "    input  wire clk,",
        f"    input  wire [{in_w - 1}:0] in_bus,",
        f"    output wire [{out_w - 1}:0] out_bus",
        ");",
    ]
    src = "in_bus"
    for li, layer in enumerate(net.layers):
        lines.append(f"    // layer {li}: {layer.out_count} neurons, "
                     f"{layer.adders} sub(s) of fan-in {layer.fanin}")
        bus_w = layer.out_count * layer.out_bits
        neuron_wires = []
        for o, neuron in enumerate(layer.neurons):
            sub_wires = []
            for a, table in enumerate(neuron.sub_tables):
                if neuron.adder_table is None:
                    wire = f"l{li}_n{o}_y"
                else:
                    wire = f"l{li}_n{o}_s{a}_y"
                sub_wires.append(wire)
                lines.append(f"    wire [{table.output_bits - 1}:0] {wire};")
                fields = ", ".join(
                    f"{src}{_slice(int(f), layer.in_count, layer.in_bits)}"
                    for f in neuron.selected[a]
                )
                mod = f"l{li}_n{o}_s{a}" if neuron.adder_table is not None else f"l{li}_n{o}_s0"
                lines.append(
                    f"    {mod} u_{mod} (.in({{{fields}}}), .out({wire}));"
                )
            if neuron.adder_table is None:
                neuron_wires.append(sub_wires[0])
            else:
                wire = f"l{li}_n{o}_y"
                lines.append(f"    wire [{layer.out_bits - 1}:0] {wire};")
                mod = f"l{li}_n{o}_add"
                lines.append(
                    f"    {mod} u_{mod} (.in({{{', '.join(sub_wires)}}}), .out({wire}));"
                )
                neuron_wires.append(wire)
        lines.append(f"    reg [{bus_w - 1}:0] l{li}_q;")
        lines.append("    always @(posedge clk) begin")
        lines.append(f"        l{li}_q <= {{{', '.join(neuron_wires)}}};")
        lines.append("    end")
        src = f"l{li}_q"
    lines.append(f"    assign out_bus = {src};")
    lines.extend(["endmodule", ""])
    return "\n".join(lines)


def format_vectors(net: CompiledNet, input_codes) -> str:
    """vectors.hex text: per line one input word and one expected word.

    Words are zero-padded hex at their exact bus widths; expected outputs
    come from the table simulator, so the testbench checks the silicon
    function against the netlist's own answers.
    """
    input_codes = np.asarray(input_codes, dtype=np.int64)
    expected = lut_eval(net, input_codes)
    in_w = net.input_count * net.input_bits
    out_w = net.class_count * net.layers[-1].out_bits
    ind, outd = _hex_digits(in_w), _hex_digits(out_w)
    in_bits, out_bits = net.input_bits, net.layers[-1].out_bits
    lines = []
    for row_in, row_out in zip(input_codes, np.atleast_2d(expected)):
        iv = 0
        for c in row_in:
            iv = (iv << in_bits) | int(c)
        ov = 0
        for c in row_out:
            ov = (ov << out_bits) | int(c)
        lines.append(f"{iv:0{ind}x} {ov:0{outd}x}")
    return "\n".join(lines) + "\n"


def emit_testbench(net: CompiledNet, vector_count: int) -> str:
    """Self-checking bench: drives vectors.hex, compares after the pipe fills."""
    in_w = net.input_count * net.input_bits
    out_w = net.class_count * net.layers[-1].out_bits
    mem_w = max(in_w, out_w)
    latency = len(net.layers)
    return f"""`timescale 1ns/1ps
// reads vectors.hex (input word, expected word per line; entries alternate)
module tb_top;
    localparam integer VECTORS = {vector_count};
    localparam integer LATENCY = {latency};
    reg clk = 1'b0;
    always #5 clk = ~clk;
    reg  [{in_w - 1}:0] in_bus;
    wire [{out_w - 1}:0] out_bus;
    reg  [{mem_w - 1}:0] vecs [0:2*VECTORS-1];
    integer j;
    integer errors;
    top dut (.clk(clk), .in_bus(in_bus), .out_bus(out_bus));
    initial begin
        $readmemh("vectors.hex", vecs);
        errors = 0;
        in_bus = {{{in_w}{{1'b0}}}};
        for (j = 0; j < VECTORS + LATENCY; j = j + 1) begin
            @(negedge clk);
            if (j >= LATENCY) begin
                if (out_bus !== vecs[2*(j-LATENCY)+1][{out_w - 1}:0]) begin
                    errors = errors + 1;
                    $display("MISMATCH vector %0d: got %h want %h",
                             j - LATENCY, out_bus, vecs[2*(j-LATENCY)+1][{out_w - 1}:0]);
                end
            end
            if (j < VECTORS) in_bus = vecs[2*j][{in_w - 1}:0];
        end
        if (errors == 0) $display("ALL %0d VECTORS PASS", VECTORS);
        else $display("FAILED: %0d of %0d vectors", errors, VECTORS);
        $finish;
    end
endmodule
"""


def module_tables(net: CompiledNet):
    """(module name, table) pairs in layer/neuron/sub emission order."""
    out = []
    for li, layer in enumerate(net.layers):
        for o, neuron in enumerate(layer.neurons):
            for a, table in enumerate(neuron.sub_tables):
                out.append((f"l{li}_n{o}_s{a}", table))
            if neuron.adder_table is not None:
                out.append((f"l{li}_n{o}_add", neuron.adder_table))
    return out


def write_rtl(net: CompiledNet, outdir, input_codes) -> dict:
    """Emit the full tree: rtl/top.v, rtl/neurons/*.v, tb/tb_top.v, tb/vectors.hex.

    Returns a manifest dict listing the written files.
    """
    rtl_dir = os.path.join(outdir, "rtl")
    neuron_dir = os.path.join(rtl_dir, "neurons")
    tb_dir = os.path.join(outdir, "tb")
    os.makedirs(neuron_dir, exist_ok=True)
    os.makedirs(tb_dir, exist_ok=True)
    files = []

    def put(path, text):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        files.append(os.path.relpath(path, outdir))

    put(os.path.join(rtl_dir, "top.v"), emit_top(net))
    for name, table in module_tables(net):
        put(os.path.join(neuron_dir, name + ".v"), emit_neuron_module(table, name))
    input_codes = np.asarray(input_codes, dtype=np.int64)
    put(os.path.join(tb_dir, "vectors.hex"), format_vectors(net, input_codes))
    put(os.path.join(tb_dir, "tb_top.v"), emit_testbench(net, input_codes.shape[0]))
    return {"files": sorted(files), "modules": [n for n, _ in module_tables(net)]}


_HEADER_RE = re.compile(
    r"//\s*lut\s+(\w+):\s*fields=(\d+)\s+field_bits=(\d+)\s+output_bits=(\d+)"
)
_ARM_RE = re.compile(r"(\d+)'h([0-9a-fA-F]+)\s*:\s*out\s*=\s*(\d+)'h([0-9a-fA-F]+)\s*;")


def parse_table_module(text: str) -> tuple[str, TruthTable]:
    """Read an emitted lookup module back into (name, TruthTable).

    Strict by design: the header comment must carry the field structure,
    and the case statement must enumerate every index exactly once.
    """
    m = _HEADER_RE.search(text)
    if not m:
        raise ValueError("no lut header comment found")
    name, fields, field_bits, output_bits = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    index_bits = fields * field_bits
    total = 1 << index_bits
    entries = np.full(total, -1, dtype=np.int64)
    seen = 0
    for am in _ARM_RE.finditer(text):
        iw, idx, ow, val = int(am.group(1)), int(am.group(2), 16), int(am.group(3)), int(am.group(4), 16)
        if iw != index_bits or ow != output_bits:
            raise ValueError(f"case arm widths {iw}->{ow}, header says {index_bits}->{output_bits}")
        if idx >= total:
            raise ValueError(f"case index {idx:#x} outside 2^{index_bits} table")
        if entries[idx] != -1:
            raise ValueError(f"duplicate case arm for index {idx:#x}")
        entries[idx] = val
        seen += 1
    if seen != total:
        raise ValueError(f"{seen} case arms, want {total}")
    return name, TruthTable(field_bits, fields, output_bits, entries)


def parse_rtl_dir(outdir) -> dict:
    """Parse every module under rtl/neurons; returns {module name: TruthTable}."""
    neuron_dir = os.path.join(outdir, "rtl", "neurons")
    out = {}
    for fname in sorted(os.listdir(neuron_dir)):
        if not fname.endswith(".v"):
            continue
        with open(os.path.join(neuron_dir, fname), "r", encoding="utf-8") as fh:
            name, table = parse_table_module(fh.read())
        out[name] = table
    return out
