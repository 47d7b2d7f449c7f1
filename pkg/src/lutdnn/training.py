"""Training loops: full-precision connectivity search, then quantized training.

The search runs a dense-capable network whose weights are magnitude/sign
pairs under the prune/regrow schedule; its only product is the wiring.
The quantized phase rebuilds the network at the searched wiring and trains
weights/batchnorm with straight-through quantizers: one float warmup epoch,
a progressive scale calibration, then quantization-aware epochs.
"""

from __future__ import annotations

import numpy as np

from .network import LutLayer, QuantizedNet
from .nn import (
    BatchNorm,
    activation_grad,
    adamw_direction,
    adamw_init,
    adamw_step,
    apply_activation,
    softmax_cross_entropy,
)
from .sparsity import (
    ConnectivityMask,
    SparsityHyper,
    deepr_star_step,
    extract_mask,
    init_sparse_weights,
    random_mask,
    sparse_update_step,
)

__all__ = ["ModelPlan", "search_mask", "train_model", "MaskSearchLayer"]

# SeedSequence purpose tags so the two phases and the data stream never
# share a random stream even under the same user seed.
_TAG_SEARCH = 0x5EA2C
_TAG_TRAIN = 0x42A13
_TAG_DATA = 0xDA7A


class ModelPlan:
    """Shapes shared by the search network and the quantized network."""

    def __init__(self, inputs: int, layer_widths, fanin: int, bits: int, degree: int,
                 adders: int, input_bits: int | None = None, input_fanin: int | None = None):
        if len(layer_widths) < 1:
            raise ValueError("need at least one layer")
        self.inputs = int(inputs)
        self.layer_widths = [int(w) for w in layer_widths]
        self.fanin = int(fanin)
        self.bits = int(bits)
        self.degree = int(degree)
        self.adders = int(adders)
        self.input_bits = int(input_bits) if input_bits else int(bits)
        self.input_fanin = int(input_fanin) if input_fanin else int(fanin)

    @property
    def in_counts(self):
        return [self.inputs] + self.layer_widths[:-1]

    @property
    def fanins(self):
        return [self.input_fanin] + [self.fanin] * (len(self.layer_widths) - 1)

    def activations(self):
        return ["relu"] * (len(self.layer_widths) - 1) + ["none"]

    def validate(self):
        for n, f in zip(self.in_counts, self.fanins):
            if f > n:
                raise ValueError(f"fan-in {f} exceeds layer input width {n}")


def _batch_slices(n: int, batch_size: int, rng):
    """Shuffled full batches (one short batch only when n < batch_size)."""
    perm = rng.permutation(n)
    if n < batch_size:
        return [perm]
    steps = n // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(steps)]


class MaskSearchLayer:
    """Dense-capable layer whose weights live as prune/regrow magnitudes.

    One row per sub-neuron (rows grouped neuron-major); sub-neuron outputs
    are summed before batchnorm and activation, mirroring the adder stage
    of the quantized layer this wiring will be dropped into.
    """

    def __init__(self, in_count, out_count, adders, init_fanin, activation, rng):
        self.in_count = in_count
        self.out_count = out_count
        self.adders = adders
        self.activation = activation
        rows = out_count * adders
        self.params = init_sparse_weights(rows, in_count, init_fanin, rng)
        self.bias = np.zeros(rows, dtype=np.float64)
        self.bn = BatchNorm(out_count)

    def forward(self, x, training=True):
        w = self.params.effective_weights()
        rows_out = x @ w.T + self.bias
        s = rows_out.reshape(x.shape[0], self.out_count, self.adders).sum(axis=2)
        bn_out = self.bn.forward(s, training=training)
        y = apply_activation(bn_out, self.activation)
        return y, {"x": x, "bn_out": bn_out, "w": w}

    def backward(self, cache, grad_y):
        g = grad_y * activation_grad(cache["bn_out"], self.activation)
        gs, g_gamma, g_beta = self.bn.backward(g)
        g_rows = np.repeat(gs[:, :, None], self.adders, axis=2)
        g_rows = g_rows.reshape(gs.shape[0], self.out_count * self.adders)
        grad_w = g_rows.T @ cache["x"]
        grad_bias = g_rows.sum(axis=0)
        grad_x = g_rows @ cache["w"]
        return {"w": grad_w, "bias": grad_bias, "gamma": g_gamma, "beta": g_beta}, grad_x


def search_mask(plan: ModelPlan, cfg: dict, dataset, seed: int):
    """Run the connectivity search; returns (ConnectivityMask, log dict).

    cfg keys: method, epochs, batch_size, lr, phase_switch, eps1, eps2,
    alpha, noise_std, init_fanin (None = dense start), maintenance_interval.
    """
    plan.validate()
    method = cfg["method"]
    meta = {
        "seed": seed,
        "method": method,
        "epochs": cfg["epochs"],
        "fanin": plan.fanin,
        "input_fanin": plan.input_fanin,
        "adders": plan.adders,
    }
    root = np.random.SeedSequence([seed, _TAG_SEARCH])
    layer_ss = root.spawn(len(plan.layer_widths))
    data_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _TAG_DATA])))

    if method == "random":
        layers_mask = []
        for n_in, width, fanin, ss in zip(plan.in_counts, plan.layer_widths, plan.fanins, layer_ss):
            rng = np.random.Generator(np.random.PCG64(ss))
            layers_mask.append(random_mask(n_in, width, fanin, plan.adders, rng))
        return ConnectivityMask(layers_mask, meta), {"method": "random"}

    if method not in ("sparselut", "deepr_star"):
        raise ValueError(f"unknown mask search method {cfg['method']!r}")

    epochs = int(cfg["epochs"])
    interval = int(cfg.get("maintenance_interval", 1))
    layers = []
    hypers = []
    step_rngs = []
    for n_in, width, fanin, ss in zip(plan.in_counts, plan.layer_widths, plan.fanins, layer_ss):
        init_ss, step_ss = ss.spawn(2)
        rng = np.random.Generator(np.random.PCG64(init_ss))
        if method == "deepr_star":
            init_fanin = fanin  # this baseline holds the budget from step one
        else:
            init_fanin = cfg.get("init_fanin") or n_in  # dense start by default
        act = "relu" if len(layers) < len(plan.layer_widths) - 1 else "none"
        layers.append(MaskSearchLayer(n_in, width, plan.adders, init_fanin, act, rng))
        hypers.append(SparsityHyper(
            target_fanin=fanin,
            lr=cfg["lr"],
            phase_switch=int(cfg["phase_switch"]),
            eps1=cfg.get("eps1", 1e-12),
            eps2=cfg.get("eps2", 5e-5),
            alpha=cfg.get("alpha", 1e-4),
            noise_std=cfg.get("noise_std"),
        ))
        step_rngs.append(np.random.Generator(np.random.PCG64(step_ss)))

    # Both the model parameters and the magnitude schedule's gradient term
    # run through AdamW; raw loss gradients vary over orders of magnitude
    # between layers, and without the adaptive step the magnitude ranking
    # never moves far from its random initialization.
    opt_states = []
    theta_states = []
    for layer in layers:
        opt_states.append(adamw_init(
            {"bias": layer.bias, "gamma": layer.bn.gamma, "beta": layer.bn.beta},
            lr=float(cfg["lr"]), weight_decay=0.0,
        ))
        theta_states.append(adamw_init({"theta": layer.params.theta},
                                       lr=float(cfg["lr"]), weight_decay=0.0))

    x_all = (dataset.x.astype(np.float64) - dataset.input_spec.zero_point) * dataset.input_spec.scale
    y_all = dataset.y
    log = {"epochs": [], "phase_switch": int(cfg["phase_switch"]), "method": method}
    step_index = 0
    for epoch in range(epochs):
        losses = []
        epoch_min = [np.inf] * len(layers)
        epoch_max = [-np.inf] * len(layers)
        for sel in _batch_slices(len(y_all), int(cfg["batch_size"]), data_rng):
            xb, yb = x_all[sel], y_all[sel]
            caches = []
            h = xb
            for layer in layers:
                h, cache = layer.forward(h, training=True)
                caches.append(cache)
            loss, g = softmax_cross_entropy(h, yb)
            losses.append(loss)
            grads_per_layer = []
            for layer, cache in zip(reversed(layers), reversed(caches)):
                grads, g = layer.backward(cache, g)
                grads_per_layer.append(grads)
            grads_per_layer.reverse()
            step_index += 1
            maintain = (step_index % interval) == 0
            for li, (layer, grads) in enumerate(zip(layers, grads_per_layer)):
                new = adamw_step(
                    {"bias": layer.bias, "gamma": layer.bn.gamma, "beta": layer.bn.beta},
                    {"bias": grads["bias"], "gamma": grads["gamma"], "beta": grads["beta"]},
                    opt_states[li],
                )
                layer.bias = new["bias"]
                layer.bn.gamma = new["gamma"]
                layer.bn.beta = new["beta"]
                # Moments accumulate for inactive connections too, so a
                # regrown connection re-enters with its gradient history.
                direction = adamw_direction(
                    {"theta": layer.params.sign * grads["w"]}, theta_states[li],
                )["theta"]
                grad_eff = layer.params.sign * direction
                if method == "deepr_star":
                    _, info = deepr_star_step(layer.params, grad_eff, hypers[li], step_rngs[li])
                    info["min_count"] = int(layer.params.row_counts().min())
                    info["max_count"] = int(layer.params.row_counts().max())
                else:
                    _, info = sparse_update_step(
                        layer.params, grad_eff, hypers[li], epoch, step_rngs[li],
                        maintain=maintain,
                    )
                epoch_min[li] = min(epoch_min[li], info["min_count"])
                epoch_max[li] = max(epoch_max[li], info["max_count"])
        log["epochs"].append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "pre_maintenance_counts": [
                {"min": int(mn), "max": int(mx)} for mn, mx in zip(epoch_min, epoch_max)
            ],
        })

    layers_mask = []
    for li, layer in enumerate(layers):
        if method == "sparselut":
            counts = layer.params.row_counts()
            if np.any(counts != plan.fanins[li]):
                # can only happen with maintenance_interval > 1: run the
                # phase-two maintenance once more without a gradient step
                _, _ = sparse_update_step(
                    layer.params, np.zeros_like(layer.params.theta),
                    hypers[li], epoch=hypers[li].phase_switch, rng=step_rngs[li],
                )
        layers_mask.append(extract_mask(layer.params, plan.fanins[li], plan.adders))
    return ConnectivityMask(layers_mask, meta), log


def build_net(plan: ModelPlan, mask: ConnectivityMask, seed: int) -> QuantizedNet:
    """Instantiate the quantized network at the searched wiring."""
    plan.validate()
    mask.validate(plan.in_counts, plan.layer_widths, plan.fanins, plan.adders)
    root = np.random.SeedSequence([seed, _TAG_TRAIN])
    layer_ss = root.spawn(len(plan.layer_widths))
    acts = plan.activations()
    layers = []
    for li, (n_in, width, fanin) in enumerate(zip(plan.in_counts, plan.layer_widths, plan.fanins)):
        rng = np.random.Generator(np.random.PCG64(layer_ss[li]))
        bits = plan.bits
        layers.append(LutLayer(
            in_count=n_in, out_count=width, fanin=fanin, bits=bits,
            degree=plan.degree, adders=plan.adders, activation=acts[li],
            indices=mask.layer_indices(li), rng=rng,
        ))
    return QuantizedNet(layers)


def train_model(plan: ModelPlan, cfg: dict, mask: ConnectivityMask, train_set, seed: int):
    """Quantization-aware training at fixed wiring; returns (net, log).

    Epoch 0 runs in float to settle weights and batchnorm statistics, then
    quantizer scales are fixed by a progressive calibration pass over a
    train prefix, and the remaining epochs train against the straight-
    through quantizers. cfg keys: epochs, batch_size, lr, weight_decay,
    beta1, beta2, eps, calibration_samples.
    """
    net = build_net(plan, mask, seed)
    net.set_input_spec(train_set.input_spec)
    data_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, _TAG_TRAIN, _TAG_DATA]))
    )
    params = {}
    no_decay = set()
    for li, layer in enumerate(net.layers):
        for name, arr in layer.params().items():
            key = f"l{li}.{name}"
            params[key] = arr
            if name != "w":
                no_decay.add(key)
    state = adamw_init(
        params, lr=float(cfg["lr"]), weight_decay=float(cfg.get("weight_decay", 1e-4)),
        beta1=float(cfg.get("beta1", 0.9)), beta2=float(cfg.get("beta2", 0.999)),
        eps=float(cfg.get("eps", 1e-8)), no_decay=no_decay,
    )
    x_all = (train_set.x.astype(np.float64) - train_set.input_spec.zero_point) \
        * train_set.input_spec.scale
    y_all = train_set.y
    epochs = int(cfg["epochs"])
    calib_n = int(cfg.get("calibration_samples", 2048))
    log = {"epochs": [], "calibration": None}
    for epoch in range(epochs):
        quantized = epoch >= 1
        if epoch == 1:
            log["calibration"] = net.calibrate(train_set.x[:calib_n])
        for layer in net.layers:
            layer.stats = {"mid_clamped": 0, "out_clamped": 0}
        losses = []
        for sel in _batch_slices(len(y_all), int(cfg["batch_size"]), data_rng):
            xb, yb = x_all[sel], y_all[sel]
            caches = []
            h = xb
            for layer in net.layers:
                h, cache = layer.forward_train(h, training=True, quantized=quantized)
                caches.append(cache)
            loss, g = softmax_cross_entropy(h, yb)
            losses.append(loss)
            grads_all = [None] * len(net.layers)
            for li in range(len(net.layers) - 1, -1, -1):
                grads_all[li], g = net.layers[li].backward(caches[li], g)
            grads = {}
            for li, gd in enumerate(grads_all):
                for name, arr in gd.items():
                    grads[f"l{li}.{name}"] = arr
            params = adamw_step(params, grads, state)
            for li, layer in enumerate(net.layers):
                layer.set_params({
                    "w": params[f"l{li}.w"], "b": params[f"l{li}.b"],
                    "gamma": params[f"l{li}.gamma"], "beta": params[f"l{li}.beta"],
                })
        log["epochs"].append({
            "epoch": epoch,
            "quantized": quantized,
            "loss": float(np.mean(losses)),
            "clamped": [dict(layer.stats) for layer in net.layers],
        })
    if epochs == 1:
        # degenerate budget: still fix scales so the net is compilable
        log["calibration"] = net.calibrate(train_set.x[:calib_n])
    return net, log
