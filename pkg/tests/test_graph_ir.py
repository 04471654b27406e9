import numpy as np
import pytest

from builders import random_cnn, residual_graph
from oracles import float_conv_loops, textbook_bn
from qtz.graph_ir import (AlreadyQuantized, Graph, MissingRange, Node, Op, QuantConfig, ShapeMismatch,
                          UnsupportedTopology, activation_boundaries, fold_bn_eval, fold_bn_training, infer_shapes,
                          insert_fake_quant, run, set_activation_ranges)


def _g(nodes, consts=None, outputs=("out",)):
    return infer_shapes(Graph(tuple(nodes), consts or {}, outputs))


def test_infer_shapes_conv_same():
    g = _g([Node("input", Op.INPUT, (), {"shape": [1, 8, 8, 3]}),
            Node("c", Op.CONV2D, ("input", "w"), {"padding": "SAME"}),
            Node("out", Op.OUTPUT, ("c",))], {"w": np.zeros((3, 3, 3, 16))})
    assert g.shapes["c"] == (1, 8, 8, 16)


def test_infer_shapes_valid_stride_and_depthwise():
    g = _g([Node("input", Op.INPUT, (), {"shape": [1, 9, 9, 4]}),
            Node("c", Op.CONV2D, ("input", "w"), {"padding": "VALID", "stride": 2}),
            Node("d", Op.DEPTHWISE, ("c", "dw"), {"padding": "SAME"}),
            Node("out", Op.OUTPUT, ("d",))], {"w": np.zeros((3, 3, 4, 5)), "dw": np.zeros((3, 3, 5, 2))})
    assert g.shapes["c"] == (1, 4, 4, 5)
    assert g.shapes["d"] == (1, 4, 4, 10)


def test_infer_shapes_concat_and_add_mismatch():
    inp = [Node("a", Op.INPUT, (), {"shape": [1, 4, 4, 8]}), Node("b", Op.INPUT, (), {"shape": [1, 4, 4, 8]}),
           Node("c", Op.INPUT, (), {"shape": [1, 4, 4, 16]})]
    g = _g(inp + [Node("cat", Op.CONCAT, ("a", "b"), {"axis": 3}), Node("out", Op.OUTPUT, ("cat",))])
    assert g.shapes["cat"] == (1, 4, 4, 16)
    with pytest.raises(ShapeMismatch) as e:
        _g(inp + [Node("add", Op.ADD, ("a", "c")), Node("out", Op.OUTPUT, ("add",))])
    assert e.value.node == "add"


def test_graph_json_round_trip():
    g = random_cnn(np.random.default_rng(0))
    g2 = Graph.from_json(g.to_json(), g.constants)
    assert g2.nodes == g.nodes and g2.outputs == g.outputs


# -- fake quant placement ---------------------------------------------------

def _fq_of(g):
    return {n.attrs["tensor"]: n for n in g.nodes if n.op is Op.FAKEQUANT}


def test_conv_relu6_chain_placement():
    g = _g([Node("input", Op.INPUT, (), {"shape": [1, 4, 4, 2]}),
            Node("c", Op.CONV2D, ("input", "w")), Node("r", Op.RELU6, ("c",)), Node("out", Op.OUTPUT, ("r",))],
           {"w": np.ones((1, 1, 2, 2))})
    fq = _fq_of(insert_fake_quant(g))
    assert set(fq) == {"input", "w", "r"}
    assert fq["w"].attrs["role"] == "weight"


def test_add_relu_and_bare_add():
    g = insert_fake_quant(residual_graph(np.random.default_rng(0)))
    fq = _fq_of(g)
    # add feeds relu: quantized after the relu only; concat has no activation after it
    assert "sum" not in fq and "rs" in fq and "cat" in fq
    assert "b" in fq  # conv output feeding an add is materialized
    tensors = [n.attrs["tensor"] for n in g.nodes if n.op is Op.FAKEQUANT]
    assert len(tensors) == len(set(tensors))


def test_bare_add_gets_fake_quant():
    g = _g([Node("a", Op.INPUT, (), {"shape": [1, 2, 2, 1]}), Node("b", Op.INPUT, (), {"shape": [1, 2, 2, 1]}),
            Node("s", Op.ADD, ("a", "b")), Node("out", Op.OUTPUT, ("s",))])
    assert "s" in _fq_of(insert_fake_quant(g))


def test_no_fake_quant_between_linear_bn_and_activation():
    g = random_cnn(np.random.default_rng(1))
    b = activation_boundaries(g)
    assert b == ["input", "a1", "a2", "pool", "fc"]
    fq = insert_fake_quant(g)
    for n in fq.nodes:
        if n.op is Op.BATCHNORM:
            assert fq.node(n.inputs[0]).op in (Op.CONV2D, Op.DEPTHWISE)


def test_already_quantized():
    g = insert_fake_quant(random_cnn(np.random.default_rng(2)))
    with pytest.raises(AlreadyQuantized):
        insert_fake_quant(g)


def test_missing_range():
    g = insert_fake_quant(random_cnn(np.random.default_rng(2)))
    with pytest.raises(MissingRange) as e:
        run(g, {"input": np.zeros((2, 8, 8, 3))})
    assert e.value.tensor == "input"


def test_fake_quant_graph_runs_with_ranges():
    rng = np.random.default_rng(3)
    g = fold_bn_eval(random_cnn(rng))
    x = rng.uniform(-1, 1, (2, 8, 8, 3))
    acts = run(g, {"input": x}, keep_all=True, dtype=np.float64)
    fq = insert_fake_quant(g, QuantConfig())
    ranges = {f"{t}/act_fq": (float(acts[t].min()), float(acts[t].max())) for t in activation_boundaries(g)}
    y_q = run(set_activation_ranges(fq, ranges), {"input": x}, dtype=np.float64)["out"]
    y = acts["out"]
    assert np.max(np.abs(y_q - y)) < 0.1 * np.max(np.abs(y))


# -- batch norm folding ------------------------------------------------------

def _single_bn(gamma, var, w, beta=0.0, mean=0.0, eps=1e-3):
    consts = {"w": np.full((1, 1, 1, 1), w), "g": np.array([gamma]), "b": np.array([beta]),
              "m": np.array([mean]), "v": np.array([var])}
    return _g([Node("input", Op.INPUT, (), {"shape": [1, 2, 2, 1]}), Node("c", Op.CONV2D, ("input", "w")),
               Node("bn", Op.BATCHNORM, ("c", "g", "b", "m", "v"), {"epsilon": eps}),
               Node("out", Op.OUTPUT, ("bn",))], consts)


def test_fold_eval_substitution():
    g = fold_bn_eval(_single_bn(2.0, 16.0, 1.0, eps=0.0))
    assert g.constants["c/w_fold"].item() == 0.5
    assert g.constants["c/b_fold"].item() == 0.0
    assert not any(n.op is Op.BATCHNORM for n in g.nodes)


def test_fold_eval_identity_is_bit_exact():
    g = _single_bn(1.0, 1.0, 0.7, eps=0.0)
    x = np.random.default_rng(0).normal(size=(1, 2, 2, 1))
    np.testing.assert_array_equal(run(fold_bn_eval(g), {"input": x})["out"], run(g, {"input": x})["out"])


def test_fold_eval_rejects_bn_after_relu():
    g = _g([Node("input", Op.INPUT, (), {"shape": [1, 2, 2, 1]}), Node("r", Op.RELU, ("input",)),
            Node("bn", Op.BATCHNORM, ("r", "g", "b", "m", "v")), Node("out", Op.OUTPUT, ("bn",))],
           {k: np.ones(1) for k in "gbmv"})
    with pytest.raises(UnsupportedTopology):
        fold_bn_eval(g)
    with pytest.raises(UnsupportedTopology):
        fold_bn_training(g)


@pytest.mark.parametrize("depthwise", [False, True])
def test_fold_eval_matches_unfolded(depthwise):
    rng = np.random.default_rng(4)
    for _ in range(10):
        g = random_cnn(rng, depthwise=depthwise, act="relu6")
        x = rng.uniform(-10, 10, (2, 8, 8, 3))
        a = run(g, {"input": x}, dtype=np.float64)["out"]
        b = run(fold_bn_eval(g), {"input": x}, dtype=np.float64)["out"]
        np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-5 * np.abs(a).max())


def test_fold_eval_leaves_original_untouched():
    g = random_cnn(np.random.default_rng(5))
    nodes = g.nodes
    fold_bn_eval(g)
    assert g.nodes == nodes


def test_fold_training_prefreeze_matches_textbook_bn():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    consts = {"w": w, "b": b, "g": rng.uniform(0.5, 2, 3), "be": rng.normal(size=3), "m": rng.normal(size=3),
              "v": rng.uniform(0.5, 2, 3)}
    g = _g([Node("input", Op.INPUT, (), {"shape": [4, 5, 5, 2]}), Node("c", Op.CONV2D, ("input", "w", "b")),
            Node("bn", Op.BATCHNORM, ("c", "g", "be", "m", "v"), {"epsilon": 1e-3}),
            Node("out", Op.OUTPUT, ("bn",))], consts)
    expect = textbook_bn(float_conv_loops(x, w, b, 1, "SAME"), consts["g"], consts["be"], 1e-3).astype(np.float32)
    got = run(fold_bn_training(g, freeze=False), {"input": x})["out"]
    np.testing.assert_array_equal(got, expect)


def test_fold_training_converged_stats_modes_agree():
    rng = np.random.default_rng(7)
    g = random_cnn(rng, bias=False)
    x = rng.normal(size=(2, 8, 8, 3))
    # make the long-term statistics equal the batch statistics of this very batch
    vals = run(g, {"input": x}, keep_all=True, dtype=np.float64, bn_training=True)
    consts = dict(g.constants)
    for conv, bn in (("c1", "bn1"), ("c2", "bn2")):
        z = vals[conv]
        consts[f"{bn}/mean"] = z.mean(axis=(0, 1, 2))
        consts[f"{bn}/var"] = z.var(axis=(0, 1, 2))
    g = Graph(g.nodes, consts, g.outputs)
    a = run(fold_bn_training(g, freeze=False), {"input": x}, dtype=np.float64)["out"]
    b = run(fold_bn_training(g, freeze=True), {"input": x}, dtype=np.float64)["out"]
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_fold_training_frozen_matches_eval_fold():
    rng = np.random.default_rng(8)
    g = random_cnn(rng)
    x = rng.normal(size=(2, 8, 8, 3))
    a = run(fold_bn_training(g, freeze=True), {"input": x}, dtype=np.float64)["out"]
    b = run(fold_bn_eval(g), {"input": x}, dtype=np.float64)["out"]
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_fold_training_then_fake_quant_skips_moments_conv():
    g = insert_fake_quant(fold_bn_training(random_cnn(np.random.default_rng(9)), freeze=False))
    weight_fq = [n for n in g.nodes if n.op is Op.FAKEQUANT and n.attrs["role"] == "weight"]
    assert {n.attrs["tensor"] for n in weight_fq} == {"bn1/fold_w", "bn2/fold_w", "fc/w"}
