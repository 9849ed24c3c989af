"""Fixed-point lowering and the integer runtime: exact rounding shifts,
bundle round trips, clip folding, overflow policing, and level-for-level
agreement with the float emulation."""

import csv
import math
from fractions import Fraction

import numpy as np
import pytest

from tqt.errors import (AccumulatorOverflowError, ContractError, GraphError,
                        TransformError)
from tqt.execute import run
from tqt.fxp import (
    ACC_BITS, MANIFEST_FIELDS, BitexactReport, FixedPointTensor,
    bitexact_check, execute_integer, load_bundle, lower, manifest,
    save_bundle, shift_requant, _shift_round,
)
from tqt.graph import Graph, serialize_graph
from tqt.tensor import Rng
from tqt.transforms import PrecisionConfig, insert_quant_layers, optimize

from fixtures import GOLDEN_TOPOLOGIES


def naive_calibrate(g, feeds_list):
    """Set each group's threshold at the max magnitude it ever sees."""
    groups = {n.attrs["group"] for n in g.nodes.values() if n.op == "quantize"}
    maxes = {}

    def hook(node, params, x):
        grp = node.attrs["group"]
        maxes[grp] = max(maxes.get(grp, 0.0), float(np.max(np.abs(x))))

    for feeds in feeds_list:
        run(g, feeds, hook=hook, passthrough=groups)
    for grp in groups:
        m = maxes.get(grp, 0.0)
        g.qparams[grp].log2_t = math.log2(m) if m > 0 else -6.0


def quantized_fixture(name, seed=0, batch=2):
    build = GOLDEN_TOPOLOGIES[name]
    g = insert_quant_layers(optimize(build()), PrecisionConfig())
    rng = np.random.default_rng(seed)
    from tqt.graph import infer_shapes
    shapes = infer_shapes(g, batch=batch)
    feeds = [{nm: rng.normal(size=shapes[nm]) for nm in g.inputs}
             for _ in range(4)]
    naive_calibrate(g, feeds)
    return g


# ---------------------------------------------------------------------------
# rounding shift

def test_shift_round_matches_exact_rational():
    xs = np.arange(-1000, 1001, dtype=np.int64)
    for shift in range(0, 6):
        got = _shift_round(xs, shift)
        want = [round(Fraction(int(x), 2 ** shift)) for x in xs]  # ties to even
        np.testing.assert_array_equal(got, want)


def test_shift_round_negative_shift_multiplies():
    np.testing.assert_array_equal(_shift_round(np.array([3, -2]), -4), [48, -32])
    np.testing.assert_array_equal(_shift_round(np.array([5]), 0), [5])


def test_shift_round_tie_cases():
    # odd quotients round away, even quotients stay: 6/4=1.5->2, 10/4=2.5->2
    np.testing.assert_array_equal(
        _shift_round(np.array([6, 10, -6, -10]), 2), [2, 2, -2, -2])


def test_shift_requant_clips():
    x = np.array([-700, -3, 3, 700])
    np.testing.assert_array_equal(shift_requant(x, 0, 8, True), [-128, -3, 3, 127])
    np.testing.assert_array_equal(
        shift_requant(x, 0, 8, True, clip_lo=0, clip_hi=100), [0, 0, 3, 100])


def test_fixed_point_tensor():
    t = FixedPointTensor(np.array([-4, 6]), bits=8, signed=True, f=3)
    np.testing.assert_array_equal(t.real, [-0.5, 0.75])
    with pytest.raises(ContractError):
        FixedPointTensor(np.array([300]), bits=8, signed=True, f=0)


# ---------------------------------------------------------------------------
# lowering structure

def test_lower_requires_quantizers():
    g = GOLDEN_TOPOLOGIES["conv_relu"]()
    with pytest.raises(TransformError):
        lower(g)


def test_lower_rejects_bare_relu_consumer():
    g = Graph()
    g.add("x", "input", shape="4")
    g.add("xq", "quantize", ("x",), bits=8, signed=True, group="gx")
    from tqt.quantize import QuantizerParams
    g.qparams["gx"] = QuantizerParams(8, True, 0.0)
    g.add("r", "relu", ("xq",))
    g.add("f", "flatten", ("r",))
    g.inputs, g.outputs = ["x"], ["f"]
    with pytest.raises(TransformError):
        lower(g)


def test_lower_rejects_mixed_fraction_add():
    from tqt.quantize import QuantizerParams
    g = Graph()
    g.add("a", "input", shape="4")
    g.add("b", "input", shape="4")
    g.add("aq", "quantize", ("a",), bits=8, signed=True, group="ga")
    g.add("bq", "quantize", ("b",), bits=8, signed=True, group="gb")
    g.qparams["ga"] = QuantizerParams(8, True, 0.0)   # f = 7
    g.qparams["gb"] = QuantizerParams(8, True, 2.0)   # f = 5
    g.add("s", "eltwise_add", ("aq", "bq"))
    g.add("sq", "quantize", ("s",), bits=8, signed=True, group="gs")
    g.qparams["gs"] = QuantizerParams(8, True, 2.0)
    g.inputs, g.outputs = ["a", "b"], ["sq"]
    with pytest.raises(TransformError):
        lower(g)


def test_lower_folds_relu_into_requant_clip():
    g = quantized_fixture("conv_relu")
    lg = lower(g)
    req = lg.nodes["act_q"]
    assert req.op == "requant"
    assert req.attrs["clip_lo"] == 0  # relu folded; unsigned range agrees
    # accumulator fraction length is the sum of the operand fraction lengths
    conv = lg.nodes["conv"]
    xq_f = lg.nodes["x_q"].attrs["f"]
    wq_f = lg.nodes["w_q"].attrs["f"]
    assert conv.attrs["f"] == xq_f + wq_f
    assert conv.attrs["bits"] == ACC_BITS


def test_lower_folds_relu6_upper_clip():
    from tqt.quantize import QuantizerParams
    g = Graph()
    g.add("x", "input", shape="4x4x2")
    g.const("w", np.linspace(-0.4, 0.4, 18).reshape(3, 3, 2, 1))
    g.add("conv", "conv2d", ("x", "w"), stride=1, pad="same")
    g.add("act", "relu6", ("conv",))
    g.inputs, g.outputs = ["x"], ["act"]
    gq = insert_quant_layers(g, PrecisionConfig())
    rng = np.random.default_rng(0)
    naive_calibrate(gq, [{"x": rng.normal(size=(2, 4, 4, 2))}])
    lg = lower(gq)
    req = lg.nodes["act_q"]
    f_q = req.attrs["f"]
    want_hi = min(255, int(np.rint(6.0 * 2.0 ** f_q)))
    assert req.attrs["clip_hi"] == want_hi
    assert req.attrs["clip_lo"] == 0


def test_manifest_and_bundle_roundtrip(tmp_path):
    g = quantized_fixture("eltwise_pair")
    lg = lower(g)
    rows = manifest(lg)
    assert all(set(r) == set(MANIFEST_FIELDS) for r in rows)
    by_name = {r["name"]: r for r in rows}
    assert by_name["r3_q"]["op"] == "requant"
    assert by_name["r3_q"]["shift"] != ""

    save_bundle(lg, str(tmp_path / "bundle"))
    back = load_bundle(str(tmp_path / "bundle"))
    assert serialize_graph(back) == serialize_graph(lg)
    with open(tmp_path / "bundle" / "scales.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == MANIFEST_FIELDS
        assert len(list(reader)) == len(rows)


# ---------------------------------------------------------------------------
# integer execution

def test_execute_integer_validates_feeds():
    g = quantized_fixture("conv_relu")
    lg = lower(g)
    with pytest.raises(GraphError):
        execute_integer(lg, {})
    with pytest.raises(ContractError):
        execute_integer(lg, {"x_q": np.zeros((1, 8, 8, 2))})  # float feed
    with pytest.raises(ContractError):
        execute_integer(lg, {"x_q": np.full((1, 8, 8, 2), 300, dtype=np.int64)})


def test_execute_integer_counts_saturations():
    lg = Graph()
    lg.add("a", "int_input", shape="4", f=0, bits=16, signed=True)
    lg.add("r", "requant", ("a",), shift=0, f=0, bits=8, signed=True,
           clip_lo=-128, clip_hi=127)
    lg.inputs, lg.outputs = ["a"], ["r"]
    out, _, stats = execute_integer(
        lg, {"a": np.array([[1000, -1000, 5, 7]], dtype=np.int64)})
    assert stats["saturations"] == {"r": 2}
    np.testing.assert_array_equal(out["r"], [[127, -128, 5, 7]])


def test_accumulator_overflow_detected():
    lg = Graph()
    lg.add("a", "int_input", shape="2", f=0, bits=32, signed=True)
    lg.add("m", "int_mul", ("a", "a"), f=0, bits=32, signed=True)
    lg.inputs, lg.outputs = ["a"], ["m"]
    big = np.array([[1 << 20, 1 << 20]], dtype=np.int64)
    with pytest.raises(AccumulatorOverflowError):
        execute_integer(lg, {"a": big})
    small = np.array([[1 << 10, -3]], dtype=np.int64)
    out, _, _ = execute_integer(lg, {"a": small})
    np.testing.assert_array_equal(out["m"], small * small)


# ---------------------------------------------------------------------------
# emulation vs integer path

@pytest.mark.parametrize("name", sorted(GOLDEN_TOPOLOGIES))
def test_integer_path_matches_emulation(name):
    g = quantized_fixture(name)
    lg = lower(g)
    report = bitexact_check(g, lg, Rng(3), trials=3, batch=2)
    assert report.ok, str(report)
    assert report.trials == 3
    assert "bit-exact" in str(report)


def test_bitexact_report_mismatch_format():
    r = BitexactReport(False, 2, 5, [(0, "q", 3, 7, 8), (1, "q", 0, 1, 2)])
    s = str(r)
    assert "MISMATCH" in s and "flat index 3" in s and "+1 more" in s
