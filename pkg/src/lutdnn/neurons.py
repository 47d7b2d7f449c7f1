"""Polynomial neuron transfer functions and their two-stage adder form.

Everything downstream of the input gather lives here as shape-agnostic
kernels built from elementwise numpy ops and fixed-order accumulation
loops. The training forward, the eval forward, and the table enumerator
all call these same functions, which is what makes the compiled tables
bit-exact against the model: identical scalar operands through identical
operations give identical float64 results regardless of batch shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .quant import QuantSpec, dequantize, quantize
from .nn import apply_activation

__all__ = [
    "monomial_index_sets",
    "monomial_count",
    "monomial_features",
    "monomial_features_grad",
    "poly_contract",
    "subneuron_values",
    "adder_combine",
    "PolyNeuron",
    "AddNeuron",
    "poly_neuron_forward",
    "add_neuron_forward",
    "layer_forward",
]


@lru_cache(maxsize=None)
def monomial_index_sets(fanin: int, degree: int):
    """Index multisets for all monomials of total degree 1..degree.

    Ordered degree-major, lexicographic within a degree: for fanin 2,
    degree 2 the sets are (0,), (1,), (0,0), (0,1), (1,1) giving the
    feature order x0, x1, x0^2, x0*x1, x1^2. The constant term is not
    included (the bias plays that role).
    """
    if fanin < 1:
        raise ValueError(f"fanin must be >= 1, got {fanin}")
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    sets = []
    for d in range(1, degree + 1):
        sets.extend(combinations_with_replacement(range(fanin), d))
    return tuple(sets)


def monomial_count(fanin: int, degree: int) -> int:
    """Number of non-constant monomials: C(fanin + degree, degree) - 1."""
    return math.comb(fanin + degree, degree) - 1


def monomial_features(z, degree: int) -> np.ndarray:
    """Map inputs (..., fanin) to monomial features (..., K).

    Each feature is a product of input entries taken in index order, so
    the float result is identical however the leading axes are batched.
    """
    z = np.asarray(z, dtype=np.float64)
    fanin = z.shape[-1]
    feats = []
    for combo in monomial_index_sets(fanin, degree):
        term = z[..., combo[0]]
        for i in combo[1:]:
            term = term * z[..., i]
        feats.append(term)
    return np.stack(feats, axis=-1)


def monomial_features_grad(z, degree: int) -> np.ndarray:
    """Jacobian of monomial_features: (..., K, F) with d feat_k / d z_f."""
    z = np.asarray(z, dtype=np.float64)
    fanin = z.shape[-1]
    sets = monomial_index_sets(fanin, degree)
    out = np.zeros(z.shape[:-1] + (len(sets), fanin), dtype=np.float64)
    for k, combo in enumerate(sets):
        for f in set(combo):
            mult = combo.count(f)
            reduced = list(combo)
            reduced.remove(f)
            term = np.full(z.shape[:-1], float(mult))
            for i in reduced:
                term = term * z[..., i]
            out[..., k, f] = term
    return out


def poly_contract(features, weights, bias) -> np.ndarray:
    """bias + sum_k weights[..., k] * features[..., k], accumulated in k order.

    The explicit loop pins the floating-point accumulation order; a BLAS
    dot would reorder it and the compiled tables would drift off the model
    by an ulp here and there.
    """
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    k_count = features.shape[-1]
    if weights.shape[-1] != k_count:
        raise ValueError(f"weights K={weights.shape[-1]} vs features K={k_count}")
    acc = np.zeros(np.broadcast_shapes(features.shape[:-1], weights.shape[:-1]), dtype=np.float64)
    acc = acc + np.asarray(bias, dtype=np.float64)
    for k in range(k_count):
        acc = acc + weights[..., k] * features[..., k]
    return acc


def subneuron_values(z, weights, bias, degree: int, activation: str) -> np.ndarray:
    """activation(poly(z)): the value a sub-neuron holds before quantization."""
    pre = poly_contract(monomial_features(z, degree), weights, bias)
    return apply_activation(pre, activation)


def adder_combine(mid_codes, mid_spec: QuantSpec) -> np.ndarray:
    """Sum the sub-neuron codes' real values over the last axis, in order."""
    mid_codes = np.asarray(mid_codes)
    acc = dequantize(mid_codes[..., 0], mid_spec)
    for a in range(1, mid_codes.shape[-1]):
        acc = acc + dequantize(mid_codes[..., a], mid_spec)
    return acc


@dataclass(frozen=True)
class PolyNeuron:
    """One polynomial sub-neuron: which inputs it reads and its polynomial."""

    selected_inputs: tuple  # sorted global input indices, length = fanin
    weights: np.ndarray  # (K,) monomial coefficients
    bias: float
    degree: int

    def __post_init__(self):
        want = monomial_count(len(self.selected_inputs), self.degree)
        if len(self.weights) != want:
            raise ValueError(
                f"{len(self.weights)} coefficients for fanin {len(self.selected_inputs)} "
                f"degree {self.degree}, want {want}"
            )
        if list(self.selected_inputs) != sorted(set(self.selected_inputs)):
            raise ValueError(f"selected_inputs must be sorted and unique: {self.selected_inputs}")


@dataclass(frozen=True)
class AddNeuron:
    """A neuron made of parallel sub-neurons joined by an adder stage.

    With a single sub-neuron the mid stage disappears: the pipeline is
    poly -> batchnorm affine -> activation -> output quantizer, one table.
    With several, each sub-neuron is activation+quantized at the mid spec
    (one bit wider than the output so the enumerated adder stage sees
    exactly the values training saw), summed, then batchnorm affine ->
    activation -> output quantizer.
    """

    subs: tuple  # tuple[PolyNeuron, ...]
    bn_scale: float  # folded batchnorm multiplier
    bn_shift: float  # folded batchnorm offset
    activation: str
    in_spec: QuantSpec
    mid_spec: QuantSpec | None  # None iff len(subs) == 1
    out_spec: QuantSpec

    def __post_init__(self):
        if len(self.subs) < 1:
            raise ValueError("a neuron needs at least one sub-neuron")
        if (self.mid_spec is None) != (len(self.subs) == 1):
            raise ValueError("mid_spec must be present exactly when there are >= 2 sub-neurons")


def poly_neuron_forward(neuron: PolyNeuron, z_values) -> np.ndarray:
    """Pre-activation polynomial value on already-gathered inputs (..., F)."""
    return poly_contract(monomial_features(z_values, neuron.degree), neuron.weights, neuron.bias)


def _sub_mid_codes(neuron: AddNeuron, x_values) -> np.ndarray:
    """Stack of (..., A) mid codes; only valid when the adder stage exists."""
    cols = []
    for sub in neuron.subs:
        z = x_values[..., list(sub.selected_inputs)]
        vals = subneuron_values(z, sub.weights, sub.bias, sub.degree, neuron.activation)
        cols.append(quantize(vals, neuron.mid_spec))
    return np.stack(cols, axis=-1)


def add_neuron_forward(neuron: AddNeuron, input_codes) -> np.ndarray:
    """Layer input codes (..., N) -> this neuron's output codes (...,)."""
    x = dequantize(input_codes, neuron.in_spec)
    if neuron.mid_spec is None:
        sub = neuron.subs[0]
        z = x[..., list(sub.selected_inputs)]
        pre = poly_neuron_forward(sub, z)
        s = pre
    else:
        mid = _sub_mid_codes(neuron, x)
        s = adder_combine(mid, neuron.mid_spec)
    y = apply_activation(neuron.bn_scale * s + neuron.bn_shift, neuron.activation)
    return quantize(y, neuron.out_spec)


def layer_forward(neurons, input_codes) -> np.ndarray:
    """Forward a whole layer of AddNeurons: (..., N) codes -> (..., O) codes."""
    outs = [add_neuron_forward(n, input_codes) for n in neurons]
    return np.stack(outs, axis=-1)
