"""Fixed fan-in quantized networks compiled to lookup-table netlists.

The package covers the full flow: connectivity search under a per-neuron
fan-in budget, quantization-aware training, enumeration of every neuron
into truth tables, Verilog emission, and bit-exact equivalence checking
between the table netlist and the trained model.
"""

__version__ = "0.1.0"

from .quant import QuantSpec, dequantize, fake_quant, quantize, round_half_away

__all__ = [
    "QuantSpec",
    "quantize",
    "dequantize",
    "fake_quant",
    "round_half_away",
    "__version__",
]
