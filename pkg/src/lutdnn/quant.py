"""Uniform affine quantization with straight-through-estimator gradients.

Every quantizer in the package goes through these functions, so training,
table enumeration, and table simulation share one rounding rule
(round-half-away-from-zero). Bit-exact equivalence between the compiled
tables and the trained model depends on that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantSpec",
    "round_half_away",
    "quantize",
    "dequantize",
    "fake_quant",
    "ste_mask",
    "ste_backward",
    "saturation_count",
    "spec_from_max",
]


@dataclass(frozen=True)
class QuantSpec:
    """One tensor role's uniform quantizer.

    ``code = clamp(round(x / scale) + zero_point, qmin, qmax)``.

    ``signed`` selects the code range: two's-complement style
    ``[-2^(bits-1), 2^(bits-1)-1]`` when True, ``[0, 2^bits - 1]`` when
    False. A nonzero ``zero_point`` shifts which code means 0.0; the model
    uses unsigned codes with a midpoint zero_point where it needs signed
    real ranges, so hardware table fields stay plain unsigned.
    """

    bits: int
    signed: bool
    scale: float
    zero_point: int = 0

    def __post_init__(self) -> None:
        if self.bits < 1 or self.bits > 24:
            raise ValueError(f"bits must be in [1, 24], got {self.bits}")
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0.0:
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    @property
    def num_codes(self) -> int:
        return 1 << self.bits

    @property
    def real_min(self) -> float:
        return (self.qmin - self.zero_point) * self.scale

    @property
    def real_max(self) -> float:
        return (self.qmax - self.zero_point) * self.scale

    def code_values(self) -> np.ndarray:
        """All representable real values, in code order."""
        return dequantize(np.arange(self.qmin, self.qmax + 1), self)


def round_half_away(x):
    """Round to nearest integer with halves away from zero.

    This is NOT numpy's default (banker's) rounding; it matches the
    rounding the emitted hardware tables bake in.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(x, spec: QuantSpec) -> np.ndarray:
    """Real values -> integer codes (int64), clamped to the code range.

    Raises ValueError on NaN or infinite input: a non-finite activation
    upstream is a training bug, and clamping it here would silently bake
    the bug into a table.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize: input contains non-finite values")
    codes = round_half_away(x / spec.scale) + float(spec.zero_point)
    return np.clip(codes, spec.qmin, spec.qmax).astype(np.int64)


def dequantize(codes, spec: QuantSpec) -> np.ndarray:
    """Integer codes -> real values: ``(code - zero_point) * scale``."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < spec.qmin or codes.max() > spec.qmax):
        raise ValueError(
            f"dequantize: code outside [{spec.qmin}, {spec.qmax}] for {spec.bits}-bit spec"
        )
    return (codes.astype(np.float64) - float(spec.zero_point)) * spec.scale


def fake_quant(x, spec: QuantSpec) -> np.ndarray:
    """Quantize then dequantize: snaps values onto the representable grid."""
    return dequantize(quantize(x, spec), spec)


def ste_mask(x, spec: QuantSpec) -> np.ndarray:
    """1.0 where the straight-through estimator passes gradient, else 0.0.

    Gradient passes wherever x lies inside the representable real range
    (inclusive); outside, the quantizer is saturated flat and the gradient
    is cut.
    """
    x = np.asarray(x, dtype=np.float64)
    return ((x >= spec.real_min) & (x <= spec.real_max)).astype(np.float64)


def ste_backward(grad_out, x, spec: QuantSpec) -> np.ndarray:
    """Backward of fake_quant under the clipped straight-through estimator."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if grad_out.shape != x.shape:
        raise ValueError(f"shape mismatch: grad {grad_out.shape} vs input {x.shape}")
    return grad_out * ste_mask(x, spec)


def saturation_count(x, spec: QuantSpec) -> int:
    """How many elements would clamp (round to a code outside the range)."""
    x = np.asarray(x, dtype=np.float64)
    codes = round_half_away(x / spec.scale) + float(spec.zero_point)
    return int(np.count_nonzero((codes < spec.qmin) | (codes > spec.qmax)))


def spec_from_max(bits: int, observed_max: float, symmetric: bool) -> QuantSpec:
    """Build an unsigned-code spec covering an observed activation range.

    ``symmetric=False`` covers [0, observed_max] (post-ReLU values,
    zero_point 0). ``symmetric=True`` covers [-observed_max, observed_max]
    with the zero_point at the midpoint code 2^(bits-1). A non-positive or
    non-finite max falls back to a unit range so a dead channel cannot
    produce a degenerate scale.
    """
    m = float(observed_max)
    if not np.isfinite(m) or m <= 0.0:
        m = 1.0
    if symmetric:
        zp = 1 << (bits - 1)
        scale = m / (zp - 1) if bits > 1 else m
        return QuantSpec(bits=bits, signed=False, scale=scale, zero_point=zp)
    qmax = (1 << bits) - 1
    return QuantSpec(bits=bits, signed=False, scale=m / qmax, zero_point=0)
