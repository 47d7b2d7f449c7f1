"""Array-form layers and the quantized network they assemble into.

A layer holds every neuron's sub-neuron wiring as one (out, adders, fanin)
index array so training is vectorized, while `layer.neuron(o)` exposes the
per-neuron view the table compiler enumerates. Both views run through the
kernels in `neurons`, so there is a single arithmetic path from training
eval to compiled table.
"""

from __future__ import annotations

import numpy as np

from . import neurons as nrn
from .nn import BatchNorm, activation_grad, apply_activation
from .quant import (
    QuantSpec,
    dequantize,
    fake_quant,
    quantize,
    saturation_count,
    spec_from_max,
    ste_mask,
)
from .serialize import read_container, write_container

__all__ = ["LutLayer", "QuantizedNet", "spec_to_dict", "spec_from_dict"]

_CKPT_KIND = b"CKPT"


def spec_to_dict(spec: QuantSpec | None):
    if spec is None:
        return None
    return {
        "bits": spec.bits,
        "signed": spec.signed,
        "scale": spec.scale,
        "zero_point": spec.zero_point,
    }


def spec_from_dict(d) -> QuantSpec | None:
    if d is None:
        return None
    return QuantSpec(
        bits=int(d["bits"]), signed=bool(d["signed"]),
        scale=float(d["scale"]), zero_point=int(d["zero_point"]),
    )


class LutLayer:
    """One compilable layer: fan-in limited polynomial neurons + adder stage.

    indices: (out_count, adders, fanin) int64, each row sorted ascending.
    Weights are (out_count, adders, K) monomial coefficients with a bias
    per sub-neuron and a batchnorm over the neuron outputs.
    """

    def __init__(self, in_count, out_count, fanin, bits, degree, adders,
                 activation, indices, rng=None):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape != (out_count, adders, fanin):
            raise ValueError(
                f"indices shape {indices.shape}, want {(out_count, adders, fanin)}"
            )
        if indices.min() < 0 or indices.max() >= in_count:
            raise ValueError("index out of range for layer input width")
        if not np.all(np.diff(indices, axis=-1) > 0):
            raise ValueError("each sub-neuron's indices must be sorted and distinct")
        self.in_count = int(in_count)
        self.out_count = int(out_count)
        self.fanin = int(fanin)
        self.bits = int(bits)
        self.degree = int(degree)
        self.adders = int(adders)
        if activation not in ("relu", "none"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.activation = activation
        self.indices = indices
        k = nrn.monomial_count(fanin, degree)
        if rng is None:
            self.w = np.zeros((out_count, adders, k), dtype=np.float64)
        else:
            self.w = rng.normal(0.0, 1.0 / np.sqrt(k), size=(out_count, adders, k))
        self.b = np.zeros((out_count, adders), dtype=np.float64)
        self.bn = BatchNorm(out_count)
        self.in_spec: QuantSpec | None = None
        self.mid_spec: QuantSpec | None = None
        self.out_spec: QuantSpec | None = None
        # clamp tallies for the last training epoch (reset by the trainer)
        self.stats = {"mid_clamped": 0, "out_clamped": 0}

    @property
    def mid_bits(self) -> int:
        return self.bits + 1

    # --- training path (real values, straight-through quantizers) ---

    def forward_train(self, x, training=True, quantized=True):
        """x: (batch, in_count) values on the input grid. Returns (y, cache)."""
        x = np.asarray(x, dtype=np.float64)
        z = x[:, self.indices]  # (B, O, A, F)
        feats = nrn.monomial_features(z, self.degree)
        pre = nrn.poly_contract(feats, self.w, self.b)  # (B, O, A)
        cache = {"x": x, "z": z, "feats": feats, "pre": pre}
        if self.adders > 1:
            a1 = apply_activation(pre, self.activation)
            if quantized:
                if self.mid_spec is None:
                    raise RuntimeError("quantized forward before calibration")
                self.stats["mid_clamped"] += saturation_count(a1, self.mid_spec)
                q1 = fake_quant(a1, self.mid_spec)
                cache["m1"] = ste_mask(a1, self.mid_spec)
            else:
                q1 = a1
            s = q1[:, :, 0]
            for a in range(1, self.adders):
                s = s + q1[:, :, a]
        else:
            s = pre[:, :, 0]
        bn_out = self.bn.forward(s, training=training)
        act2 = apply_activation(bn_out, self.activation)
        cache["bn_out"] = bn_out
        if quantized:
            if self.out_spec is None:
                raise RuntimeError("quantized forward before calibration")
            self.stats["out_clamped"] += saturation_count(act2, self.out_spec)
            y = fake_quant(act2, self.out_spec)
            cache["m2"] = ste_mask(act2, self.out_spec)
        else:
            y = act2
        cache["quantized"] = quantized
        return y, cache

    def backward(self, cache, grad_y):
        """Returns (param grads dict, grad wrt layer input x)."""
        g = np.asarray(grad_y, dtype=np.float64)
        if cache["quantized"]:
            g = g * cache["m2"]
        g = g * activation_grad(cache["bn_out"], self.activation)
        gs, g_gamma, g_beta = self.bn.backward(g)
        if self.adders > 1:
            g1 = np.repeat(gs[:, :, None], self.adders, axis=2)
            if cache["quantized"]:
                g1 = g1 * cache["m1"]
            g1 = g1 * activation_grad(cache["pre"], self.activation)
        else:
            g1 = gs[:, :, None]
        feats = cache["feats"]
        grad_w = np.einsum("boa,boak->oak", g1, feats)
        grad_b = g1.sum(axis=0)
        g_feats = g1[..., None] * self.w  # (B, O, A, K)
        if self.degree == 1:
            gz = g_feats
        else:
            jac = nrn.monomial_features_grad(cache["z"], self.degree)
            gz = np.einsum("boak,boakf->boaf", g_feats, jac)
        gx = np.zeros_like(cache["x"])
        batch_ix = np.arange(gx.shape[0])[:, None, None, None]
        np.add.at(gx, (batch_ix, self.indices[None, :, :, :]), gz)
        grads = {"w": grad_w, "b": grad_b, "gamma": g_gamma, "beta": g_beta}
        return grads, gx

    def params(self) -> dict:
        return {"w": self.w, "b": self.b, "gamma": self.bn.gamma, "beta": self.bn.beta}

    def set_params(self, p: dict) -> None:
        self.w = p["w"]
        self.b = p["b"]
        self.bn.gamma = p["gamma"]
        self.bn.beta = p["beta"]

    # --- eval path (integer codes; the path the compiled tables must match) ---

    def eval_codes(self, codes) -> np.ndarray:
        if self.in_spec is None or self.out_spec is None:
            raise RuntimeError("eval before calibration")
        x = dequantize(codes, self.in_spec)
        z = x[..., self.indices]  # (..., O, A, F) via fancy index on last axis
        if self.adders > 1:
            vals = nrn.subneuron_values(z, self.w, self.b, self.degree, self.activation)
            mid = quantize(vals, self.mid_spec)
            s = nrn.adder_combine(mid, self.mid_spec)
        else:
            feats = nrn.monomial_features(z, self.degree)
            s = nrn.poly_contract(feats, self.w, self.b)[..., 0]
        a, c = self.bn.fold()
        y = apply_activation(a * s + c, self.activation)
        return quantize(y, self.out_spec)

    def neuron(self, o: int) -> nrn.AddNeuron:
        """Per-neuron view for the table compiler; same parameters, same kernels."""
        subs = tuple(
            nrn.PolyNeuron(
                selected_inputs=tuple(int(i) for i in self.indices[o, a]),
                weights=self.w[o, a].copy(),
                bias=float(self.b[o, a]),
                degree=self.degree,
            )
            for a in range(self.adders)
        )
        a_fold, c_fold = self.bn.fold()
        return nrn.AddNeuron(
            subs=subs,
            bn_scale=float(a_fold[o]),
            bn_shift=float(c_fold[o]),
            activation=self.activation,
            in_spec=self.in_spec,
            mid_spec=self.mid_spec if self.adders > 1 else None,
            out_spec=self.out_spec,
        )


class QuantizedNet:
    """A stack of LutLayers with shared input/output quantization contracts."""

    def __init__(self, layers: list):
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.in_count != prev.out_count:
                raise ValueError(
                    f"layer width mismatch: {prev.out_count} out vs {cur.in_count} in"
                )
        self.layers = layers

    @property
    def input_count(self) -> int:
        return self.layers[0].in_count

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_count

    def set_input_spec(self, spec: QuantSpec) -> None:
        self.layers[0].in_spec = spec

    def calibrate(self, input_codes) -> dict:
        """Fix mid/out quantizer scales from observed maxima, layer by layer.

        Runs in quantized mode: each layer's scales are chosen from values
        computed under the already-calibrated upstream quantizers, so on
        this data no stage-1 value clamps (verified and reported).

        Batch-norm running statistics are re-estimated from the calibration
        batch before folding.  The warmup stats lag the warmed-up weights
        (they are a momentum average taken while the weights moved), and a
        folded affine built from them mis-normalizes badly enough to blow up
        the per-layer maxima.  Re-estimating makes the folded transform and
        the frozen scales describe the same distribution.
        """
        if self.layers[0].in_spec is None:
            raise RuntimeError("set_input_spec must run before calibrate")
        input_codes = np.asarray(input_codes)
        if input_codes.shape[0] < 2:
            raise ValueError("calibration needs at least 2 samples")
        x = dequantize(input_codes, self.layers[0].in_spec)
        report = {"mid_clamped": [], "out_clamped": []}
        prev_spec = self.layers[0].in_spec
        for layer in self.layers:
            layer.in_spec = prev_spec
            symmetric = layer.activation == "none"
            z = x[:, layer.indices]
            if layer.adders > 1:
                vals = nrn.subneuron_values(z, layer.w, layer.b, layer.degree, layer.activation)
                peak = float(np.abs(vals).max()) if symmetric else float(vals.max())
                layer.mid_spec = spec_from_max(layer.mid_bits, peak, symmetric)
                report["mid_clamped"].append(saturation_count(vals, layer.mid_spec))
                mid = quantize(vals, layer.mid_spec)
                s = nrn.adder_combine(mid, layer.mid_spec)
            else:
                feats = nrn.monomial_features(z, layer.degree)
                s = nrn.poly_contract(feats, layer.w, layer.b)[..., 0]
                report["mid_clamped"].append(0)
            layer.bn.running_mean = s.mean(axis=0)
            layer.bn.running_var = s.var(axis=0, ddof=1)
            a, c = layer.bn.fold()
            act2 = apply_activation(a * s + c, layer.activation)
            mags = np.abs(act2) if symmetric else act2
            # Percentile, not max: at small bit widths a scale stretched to
            # cover the single largest activation parks nearly every value
            # in code zero.  Clipping the extreme tail costs far less than
            # wasting the code range, and the clamp counts are reported.
            peak = float(np.percentile(mags, 99.7))
            if peak <= 0.0:
                peak = float(mags.max())
            layer.out_spec = spec_from_max(layer.bits, peak, symmetric)
            report["out_clamped"].append(saturation_count(act2, layer.out_spec))
            out_codes = quantize(act2, layer.out_spec)
            x = dequantize(out_codes, layer.out_spec)
            prev_spec = layer.out_spec
        return report

    def eval_codes(self, codes, chunk: int = 4096) -> np.ndarray:
        """Input codes (B, N) -> output codes (B, classes), chunked for memory."""
        codes = np.asarray(codes)
        squeeze = codes.ndim == 1
        codes = np.atleast_2d(codes)
        outs = []
        for lo in range(0, codes.shape[0], chunk):
            part = codes[lo:lo + chunk]
            for layer in self.layers:
                part = layer.eval_codes(part)
            outs.append(part)
        out = np.concatenate(outs, axis=0)
        return out[0] if squeeze else out

    def predict(self, codes, chunk: int = 4096) -> np.ndarray:
        """Class labels by argmax over output codes; ties take the lowest index."""
        return np.argmax(self.eval_codes(codes, chunk=chunk), axis=-1)

    # --- checkpoint io ---

    def save(self, path, config_digest: str = "") -> None:
        meta = {
            "version": 1,
            "config_digest": config_digest,
            "input_spec": spec_to_dict(self.layers[0].in_spec),
            "layers": [
                {
                    "in_count": l.in_count,
                    "out_count": l.out_count,
                    "fanin": l.fanin,
                    "bits": l.bits,
                    "degree": l.degree,
                    "adders": l.adders,
                    "activation": l.activation,
                    "bn_eps": l.bn.eps,
                    "bn_momentum": l.bn.momentum,
                    "mid_spec": spec_to_dict(l.mid_spec),
                    "out_spec": spec_to_dict(l.out_spec),
                }
                for l in self.layers
            ],
        }
        arrays = {}
        for i, l in enumerate(self.layers):
            p = f"L{i:02d}."
            arrays[p + "indices"] = l.indices
            arrays[p + "w"] = l.w
            arrays[p + "b"] = l.b
            for name, arr in l.bn.state_arrays().items():
                arrays[p + name] = arr
        write_container(path, _CKPT_KIND, meta, arrays)

    @classmethod
    def load(cls, path) -> "QuantizedNet":
        meta, arrays = read_container(path, _CKPT_KIND)
        layers = []
        for i, lm in enumerate(meta["layers"]):
            p = f"L{i:02d}."
            layer = LutLayer(
                in_count=lm["in_count"], out_count=lm["out_count"], fanin=lm["fanin"],
                bits=lm["bits"], degree=lm["degree"], adders=lm["adders"],
                activation=lm["activation"], indices=arrays[p + "indices"],
            )
            layer.bn = BatchNorm(lm["out_count"], eps=lm["bn_eps"], momentum=lm["bn_momentum"])
            layer.bn.load_state_arrays({
                "gamma": arrays[p + "gamma"],
                "beta": arrays[p + "beta"],
                "running_mean": arrays[p + "running_mean"],
                "running_var": arrays[p + "running_var"],
            })
            layer.w = arrays[p + "w"].astype(np.float64)
            layer.b = arrays[p + "b"].astype(np.float64)
            layer.mid_spec = spec_from_dict(lm["mid_spec"])
            layer.out_spec = spec_from_dict(lm["out_spec"])
            layers.append(layer)
        net = cls(layers)
        net.set_input_spec(spec_from_dict(meta["input_spec"]))
        # re-link inter-layer specs
        for prev, cur in zip(net.layers, net.layers[1:]):
            cur.in_spec = prev.out_spec
        return net

    def config_digest_of(self, path) -> str:
        meta, _ = read_container(path, _CKPT_KIND)
        return meta.get("config_digest", "")
