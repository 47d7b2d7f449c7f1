"""LutLayer/QuantizedNet: gradients, calibration invariants, checkpoints."""

import numpy as np
import pytest

from lutdnn.network import LutLayer, QuantizedNet, spec_from_dict, spec_to_dict
from lutdnn.nn import softmax_cross_entropy
from lutdnn.quant import QuantSpec, dequantize, quantize, spec_from_max


def small_layer(seed=0, adders=2, activation="relu", degree=2, out_count=3,
                in_count=6, fanin=2):
    rng = np.random.default_rng(seed)
    idx = np.stack([
        np.stack([np.sort(rng.choice(in_count, fanin, replace=False))
                  for _ in range(adders)])
        for _ in range(out_count)
    ])
    return LutLayer(in_count, out_count, fanin, bits=3, degree=degree,
                    adders=adders, activation=activation, indices=idx, rng=rng)


def small_net(seed=0):
    rng = np.random.default_rng(seed)

    def idx(i, o, a, f):
        return np.stack([
            np.stack([np.sort(rng.choice(i, f, replace=False)) for _ in range(a)])
            for _ in range(o)
        ])

    l0 = LutLayer(6, 5, 2, bits=3, degree=2, adders=2, activation="relu",
                  indices=idx(6, 5, 2, 2), rng=rng)
    l1 = LutLayer(5, 3, 2, bits=3, degree=1, adders=1, activation="none",
                  indices=idx(5, 3, 1, 2), rng=rng)
    return QuantizedNet([l0, l1])


def calibrated_net(seed=0, samples=128):
    net = small_net(seed)
    in_spec = spec_from_max(3, 1.0, symmetric=True)
    net.set_input_spec(in_spec)
    rng = np.random.default_rng(seed + 100)
    codes = rng.integers(0, 8, size=(samples, 6))
    net.calibrate(codes)
    return net, codes


def test_layer_index_validation():
    with pytest.raises(ValueError, match="shape"):
        LutLayer(6, 2, 2, 3, 1, 1, "relu", indices=np.zeros((2, 2, 2), dtype=np.int64))
    bad = np.array([[[0, 0]], [[1, 2]]])  # repeated index in a sub
    with pytest.raises(ValueError, match="sorted"):
        LutLayer(6, 2, 2, 3, 1, 1, "relu", indices=bad)
    with pytest.raises(ValueError, match="out of range"):
        LutLayer(2, 2, 2, 3, 1, 1, "relu", indices=np.array([[[0, 5]], [[0, 1]]]))
    with pytest.raises(ValueError, match="activation"):
        LutLayer(6, 1, 2, 3, 1, 1, "tanh", indices=np.array([[[0, 1]]]))


def test_layer_float_gradients_match_fd():
    """Full-layer backward against central differences, quantizers off."""
    layer = small_layer(seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 6))
    wl = rng.normal(size=(16, 3))

    def loss():
        y, _ = layer.forward_train(x, training=True, quantized=False)
        return float((wl * y).sum())

    y, cache = layer.forward_train(x, training=True, quantized=False)
    grads, gx = layer.backward(cache, wl)

    # relu kinks break FD; nudge any exact-zero pre-activations away first
    assert not np.any(cache["pre"] == 0.0)

    for name, arr in (("w", layer.w), ("b", layer.b),
                      ("gamma", layer.bn.gamma), ("beta", layer.bn.beta)):
        flat = arr.reshape(-1)
        an = grads[name].reshape(-1)
        picks = np.random.default_rng(3).choice(len(flat), min(6, len(flat)), replace=False)
        for i in picks:
            h = 1e-6
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            assert fd == pytest.approx(an[i], rel=1e-4, abs=1e-7), f"{name}[{i}]"

    # input gradient
    flat = x.reshape(-1)
    picks = np.random.default_rng(4).choice(flat.size, 8, replace=False)
    for i in picks:
        h = 1e-6
        old = flat[i]
        flat[i] = old + h
        lp = loss()
        flat[i] = old - h
        lm = loss()
        flat[i] = old
        fd = (lp - lm) / (2 * h)
        assert fd == pytest.approx(gx.reshape(-1)[i], rel=1e-4, abs=1e-7)


def test_layer_single_adder_path_gradients():
    layer = small_layer(seed=5, adders=1, degree=1)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(12, 6))
    wl = rng.normal(size=(12, 3))
    y, cache = layer.forward_train(x, training=True, quantized=False)
    grads, gx = layer.backward(cache, wl)

    def loss():
        yy, _ = layer.forward_train(x, training=True, quantized=False)
        return float((wl * yy).sum())

    flat = layer.w.reshape(-1)
    for i in range(0, flat.size, 2):
        h = 1e-6
        old = flat[i]
        flat[i] = old + h
        lp = loss()
        flat[i] = old - h
        lm = loss()
        flat[i] = old
        assert (lp - lm) / (2 * h) == pytest.approx(grads["w"].reshape(-1)[i],
                                                    rel=1e-4, abs=1e-7)


def test_quantized_forward_requires_calibration():
    layer = small_layer()
    x = np.zeros((4, 6))
    with pytest.raises(RuntimeError):
        layer.forward_train(x, training=True, quantized=True)


def test_calibration_mid_clamp_is_zero_by_construction():
    net, codes = calibrated_net(seed=7)
    net2 = small_net(seed=7)
    net2.set_input_spec(net.layers[0].in_spec)
    report = net2.calibrate(codes)
    assert report["mid_clamped"] == [0, 0]


def test_calibration_needs_two_samples():
    net = small_net()
    net.set_input_spec(spec_from_max(3, 1.0, symmetric=True))
    with pytest.raises(ValueError):
        net.calibrate(np.zeros((1, 6), dtype=np.int64))


def test_calibration_requires_input_spec():
    net = small_net()
    with pytest.raises(RuntimeError):
        net.calibrate(np.zeros((4, 6), dtype=np.int64))


def test_eval_codes_chunking_invariant():
    net, codes = calibrated_net(seed=8, samples=300)
    full = net.eval_codes(codes, chunk=4096)
    small = net.eval_codes(codes, chunk=7)
    np.testing.assert_array_equal(full, small)


def test_eval_codes_single_row_squeezes():
    net, codes = calibrated_net(seed=9)
    row = net.eval_codes(codes[0])
    assert row.shape == (3,)
    np.testing.assert_array_equal(row, net.eval_codes(codes[:1])[0])


def test_eval_matches_per_neuron_view():
    """Vectorized layer eval must equal the compiler's per-neuron view."""
    from lutdnn.neurons import add_neuron_forward

    net, codes = calibrated_net(seed=10, samples=64)
    x = codes
    for layer in net.layers:
        vec = layer.eval_codes(x)
        for o in range(layer.out_count):
            per = add_neuron_forward(layer.neuron(o), x)
            np.testing.assert_array_equal(vec[:, o], per)
        x = vec


def test_predict_tie_breaks_lowest_index():
    net, codes = calibrated_net(seed=11)
    out = net.eval_codes(codes)
    pred = net.predict(codes)
    for row, cls in zip(out, pred):
        assert row[cls] == row.max()
        assert cls == int(np.argmax(row))


def test_net_width_mismatch_rejected():
    l0 = small_layer(out_count=3)
    l1 = small_layer(in_count=4, out_count=2)
    with pytest.raises(ValueError):
        QuantizedNet([l0, l1])
    with pytest.raises(ValueError):
        QuantizedNet([])


def test_spec_dict_round_trip():
    spec = QuantSpec(bits=4, signed=False, scale=0.3, zero_point=8)
    assert spec_from_dict(spec_to_dict(spec)) == spec
    assert spec_to_dict(None) is None
    assert spec_from_dict(None) is None


def test_checkpoint_round_trip_preserves_eval(tmp_path):
    net, codes = calibrated_net(seed=12)
    path = tmp_path / "model.ckpt"
    net.save(path, config_digest="abc123")
    again = QuantizedNet.load(path)
    np.testing.assert_array_equal(net.eval_codes(codes), again.eval_codes(codes))
    assert again.config_digest_of(path) == "abc123"
    # derived spec relinking: layer 1 reads layer 0's output grid
    assert again.layers[1].in_spec == again.layers[0].out_spec


def test_checkpoint_resave_is_byte_identical(tmp_path):
    net, _ = calibrated_net(seed=13)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    net.save(p1, config_digest="d")
    QuantizedNet.load(p1).save(p2, config_digest="d")
    assert p1.read_bytes() == p2.read_bytes()


def test_layer_neuron_view_requires_specs():
    layer = small_layer()
    with pytest.raises(Exception):
        layer.neuron(0)  # no specs assigned yet
