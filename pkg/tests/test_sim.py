"""Table-netlist simulation and equivalence checking."""

import numpy as np
import pytest

from lutdnn.compiler import compile_network
from lutdnn.data import Dataset
from lutdnn.sim import boundary_vectors, check_equivalence, evaluate_accuracy, lut_eval

from test_network import calibrated_net


def test_boundary_vectors_shape_and_content():
    v = boundary_vectors(3, 2)
    assert v.shape == (5, 3)
    np.testing.assert_array_equal(v[0], [0, 0, 0])
    np.testing.assert_array_equal(v[1], [3, 3, 3])
    np.testing.assert_array_equal(v[2], [3, 0, 0])
    np.testing.assert_array_equal(v[3], [0, 3, 0])
    np.testing.assert_array_equal(v[4], [0, 0, 3])


def test_lut_eval_input_validation():
    net, _ = calibrated_net(seed=30, samples=32)
    compiled = compile_network(net)
    with pytest.raises(ValueError, match="inputs"):
        lut_eval(compiled, np.zeros((2, compiled.input_count + 1), dtype=np.int64))
    bad = np.zeros((1, compiled.input_count), dtype=np.int64)
    bad[0, 0] = 1 << compiled.input_bits
    with pytest.raises(ValueError, match="width"):
        lut_eval(compiled, bad)
    bad[0, 0] = -1
    with pytest.raises(ValueError, match="width"):
        lut_eval(compiled, bad)


def test_lut_eval_squeezes_single_vector():
    net, codes = calibrated_net(seed=31, samples=32)
    compiled = compile_network(net)
    one = lut_eval(compiled, codes[0])
    assert one.ndim == 1
    np.testing.assert_array_equal(one, lut_eval(compiled, codes[:1])[0])


def test_lut_eval_chunking_invariant():
    net, codes = calibrated_net(seed=32, samples=50)
    compiled = compile_network(net)
    np.testing.assert_array_equal(
        lut_eval(compiled, codes, chunk=7), lut_eval(compiled, codes, chunk=8192)
    )


def test_check_equivalence_clean_report():
    net, _ = calibrated_net(seed=33, samples=128)
    compiled = compile_network(net)
    report = check_equivalence(net, compiled, samples=500, seed=9)
    assert report["mismatches"] == 0
    assert report["first_mismatch"] is None
    assert report["boundary_vectors"] == net.layers[0].in_count + 2
    assert report["random_vectors"] == 500
    assert report["checked"] == report["boundary_vectors"] + 500


def test_check_equivalence_flags_corrupted_table():
    net, _ = calibrated_net(seed=34, samples=128)
    compiled = compile_network(net)
    # flip one entry in the last layer's first table
    table = compiled.layers[-1].neurons[0].sub_tables[0]
    qmax = (1 << table.output_bits) - 1
    table.entries[:] = qmax - table.entries
    report = check_equivalence(net, compiled, samples=300, seed=9)
    assert report["mismatches"] > 0
    fm = report["first_mismatch"]
    assert fm is not None
    assert fm["model_code"] != fm["table_code"]
    assert 0 <= fm["sample"] < report["checked"]


def test_check_equivalence_deterministic():
    net, _ = calibrated_net(seed=35, samples=64)
    compiled = compile_network(net)
    a = check_equivalence(net, compiled, samples=200, seed=4)
    b = check_equivalence(net, compiled, samples=200, seed=4)
    assert a == b


def test_evaluate_accuracy_model_and_netlist_agree():
    net, codes = calibrated_net(seed=36, samples=64)
    compiled = compile_network(net)
    rng = np.random.default_rng(0)
    ds = Dataset(x=codes, y=rng.integers(0, 3, size=codes.shape[0]),
                 input_spec=net.layers[0].in_spec)
    acc_model = evaluate_accuracy(net, ds)
    acc_tables = evaluate_accuracy(compiled, ds)
    assert acc_model == acc_tables
    assert 0.0 <= acc_model <= 1.0


def test_evaluate_accuracy_ties_take_lowest_index():
    class Flat:
        def eval_codes(self, x, chunk=4096):
            return np.zeros((np.atleast_2d(x).shape[0], 4), dtype=np.int64)

    from lutdnn.quant import QuantSpec

    ds = Dataset(x=np.zeros((6, 2), dtype=np.int64),
                 y=np.array([0, 0, 0, 1, 2, 3]),
                 input_spec=QuantSpec(bits=2, signed=False, scale=1.0))
    assert evaluate_accuracy(Flat(), ds) == 0.5
