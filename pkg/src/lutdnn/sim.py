"""Software simulation of the table netlist and equivalence checking.

`lut_eval` runs pure integer lookups (the exact function the emitted
hardware computes); `check_equivalence` drives both the table netlist and
the trained model's eval path over boundary plus random input vectors and
demands identical output codes everywhere.
"""

from __future__ import annotations

import numpy as np

from .compiler import CompiledNet, pack_fields

__all__ = [
    "lut_eval",
    "boundary_vectors",
    "check_equivalence",
    "evaluate_accuracy",
]


def lut_eval(net: CompiledNet, codes, chunk: int = 8192) -> np.ndarray:
    """Input codes (B, N) -> output codes (B, classes) by table lookups only."""
    codes = np.asarray(codes, dtype=np.int64)
    squeeze = codes.ndim == 1
    codes = np.atleast_2d(codes)
    if codes.shape[1] != net.input_count:
        raise ValueError(f"{codes.shape[1]} inputs, netlist wants {net.input_count}")
    if codes.min() < 0 or codes.max() >= (1 << net.input_bits):
        raise ValueError("input code outside the declared input width")
    outs = []
    for lo in range(0, codes.shape[0], chunk):
        x = codes[lo:lo + chunk]
        for layer in net.layers:
            cols = np.empty((x.shape[0], layer.out_count), dtype=np.int64)
            for o, neuron in enumerate(layer.neurons):
                mids = []
                for a, table in enumerate(neuron.sub_tables):
                    z = x[:, neuron.selected[a]]
                    mids.append(table.lookup(pack_fields(z, layer.in_bits)))
                if neuron.adder_table is None:
                    cols[:, o] = mids[0]
                else:
                    packed = pack_fields(np.stack(mids, axis=-1), layer.mid_bits)
                    cols[:, o] = neuron.adder_table.lookup(packed)
            x = cols
        outs.append(x)
    out = np.concatenate(outs, axis=0)
    return out[0] if squeeze else out


def boundary_vectors(input_count: int, input_bits: int) -> np.ndarray:
    """The systematic corner inputs every equivalence run must cover.

    All-zeros, all-max, and one-hot-per-field (each input alone at max,
    everything else zero): input_count + 2 vectors.
    """
    qmax = (1 << input_bits) - 1
    vecs = np.zeros((input_count + 2, input_count), dtype=np.int64)
    vecs[1, :] = qmax
    for i in range(input_count):
        vecs[2 + i, i] = qmax
    return vecs


def check_equivalence(model, net: CompiledNet, samples: int = 100_000,
                      seed: int = 0, chunk: int = 4096) -> dict:
    """Compare model eval codes against table lookups on shared inputs.

    Inputs are the boundary vectors followed by `samples` uniform random
    code vectors. Returns a report dict: checked/mismatch counts and the
    first mismatch location (sample index within the run, output neuron,
    both codes) when any disagree.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xE9])))
    qmax = (1 << net.input_bits) - 1
    bound = boundary_vectors(net.input_count, net.input_bits)
    report = {
        "checked": 0,
        "mismatches": 0,
        "first_mismatch": None,
        "boundary_vectors": int(bound.shape[0]),
        "random_vectors": int(samples),
    }
    done = 0
    remaining_random = samples
    pending = bound
    while pending is not None:
        for lo in range(0, pending.shape[0], chunk):
            block = pending[lo:lo + chunk]
            want = model.eval_codes(block, chunk=chunk)
            got = lut_eval(net, block, chunk=chunk)
            neq = want != got
            report["checked"] += block.shape[0]
            if np.any(neq):
                report["mismatches"] += int(np.count_nonzero(neq.any(axis=1)))
                if report["first_mismatch"] is None:
                    s, o = np.argwhere(neq)[0]
                    report["first_mismatch"] = {
                        "sample": int(done + s),
                        "output": int(o),
                        "model_code": int(want[s, o]),
                        "table_code": int(got[s, o]),
                    }
            done += block.shape[0]
        if remaining_random > 0:
            take = min(remaining_random, 1 << 16)
            pending = rng.integers(0, qmax + 1, size=(take, net.input_count), dtype=np.int64)
            remaining_random -= take
        else:
            pending = None
    return report


def evaluate_accuracy(model_or_net, dataset, chunk: int = 4096) -> float:
    """Top-1 accuracy on a Dataset; argmax ties resolve to the lowest index.

    Accepts either the trained model or the compiled netlist; for an
    equivalent pair the two give the same number by construction.
    """
    if isinstance(model_or_net, CompiledNet):
        out = lut_eval(model_or_net, dataset.x, chunk=chunk)
    else:
        out = model_or_net.eval_codes(dataset.x, chunk=chunk)
    pred = np.argmax(out, axis=1)
    return float((pred == dataset.y).mean())
