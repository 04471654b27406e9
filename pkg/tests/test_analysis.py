import csv
import json

import numpy as np
import pytest

from builders import random_cnn
from oracles import uniform_sqnr_db
from qtz.analysis import (SQNR_CAP_DB, DegenerateTensor, compare_schemes, db_bins, normalized_power, sqnr,
                          weight_power_histogram, weight_power_report, write_reports)
from qtz.graph_ir import Graph, Node, Op
from qtz.quant_core import PER_CHANNEL, PER_LAYER, Scheme, tensor_params


def test_on_code_points_is_capped():
    w = np.arange(-127, 128, dtype=np.float64).reshape(-1, 1) * 0.01
    assert sqnr(w).tolist() == [SQNR_CAP_DB]
    assert sqnr(np.zeros((4, 2))).tolist() == [SQNR_CAP_DB] * 2


def test_empty_rejected():
    with pytest.raises(ValueError):
        sqnr(np.zeros((0, 3)))


def test_uniform_sqnr_matches_empirical_oracle():
    rng = np.random.default_rng(0)
    w = rng.uniform(-1, 1, (1_000_000, 1))
    got = sqnr(w)[0]
    # independent empirical oracle: quantize with step max|w|/127, round half away, measure noise
    step = np.abs(w).max() / 127
    q = np.sign(w) * np.floor(np.abs(w) / step + 0.5) * step
    oracle = 10 * np.log10((w ** 2).sum() / ((w - q) ** 2).sum())
    assert got == pytest.approx(oracle, abs=0.05)
    assert got == pytest.approx(uniform_sqnr_db(127), abs=0.3)


def test_scale_spread_favors_per_channel():
    rng = np.random.default_rng(1)
    w = rng.uniform(-1, 1, (3, 3, 32, 2))
    w[..., 1] *= 0.01
    w = w.reshape(-1, 2)
    pc = sqnr(w, "symmetric_signed", "per_channel")
    pl = sqnr(w, "affine", "per_layer")
    assert pc[1] - pl[1] >= 20


def test_six_db_per_bit():
    rng = np.random.default_rng(2)
    w = rng.uniform(-1, 1, (50_000, 3))
    for lo, hi in ((4, 8), (8, 16)):
        per_bit = (sqnr(w, n_bits=hi) - sqnr(w, n_bits=lo)) / (hi - lo)
        assert np.all((per_bit >= 5) & (per_bit <= 7))


@pytest.mark.parametrize("scheme", ["affine", "symmetric_signed"])
def test_per_channel_never_worse_with_clear_step_gap(scheme):
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = rng.normal(size=(3, 3, 8, 16)) * np.exp(rng.uniform(-3, 3, 16))
        w = w.reshape(-1, 16)
        pc, pl = sqnr(w, scheme, "per_channel"), sqnr(w, scheme, "per_layer")
        step_c = np.array([p.scale for p in tensor_params(w, PER_CHANNEL, Scheme(scheme))])
        step_l = tensor_params(w, PER_LAYER, Scheme(scheme))[0].scale
        same = step_c == step_l
        np.testing.assert_array_equal(pc[same], pl[same])
        clear = step_c <= step_l / 2
        assert np.all(pc[clear] > pl[clear])


# -- power histograms -------------------------------------------------------

def test_equal_weights_single_bin():
    h = weight_power_histogram(np.full((4, 4), 0.3))
    assert h.counts.tolist() == [16]
    assert h.edges_db[0] <= 0.0 < h.edges_db[1]
    assert h.max_normalized_power == pytest.approx(1.0)


def test_histogram_mass_and_degenerate():
    w = np.random.default_rng(4).normal(size=(5, 7))
    w[0, 0] = 0.0
    assert weight_power_histogram(w).counts.sum() == w.size
    with pytest.raises(DegenerateTensor):
        weight_power_histogram(np.zeros(3))


def test_normal_chi_square_tail():
    w = np.random.default_rng(5).normal(size=1_000_000)
    frac = np.mean(normalized_power(w) > 6.63)
    assert frac == pytest.approx(0.01, abs=0.001)


def test_db_bins_aligned():
    edges, counts = db_bins([-0.5, 0.2, 3.9])
    assert edges.tolist() == [-1, 0, 1, 2, 3, 4]
    assert counts.tolist() == [1, 1, 0, 0, 1]


# -- model-level reports ----------------------------------------------------

def _spread_model(spread, identity=False, seed=6, uniform=False):
    rng = np.random.default_rng(seed)
    c = 16
    w = rng.uniform(-0.3, 0.3, (3, 3, 64, c)) if uniform else rng.normal(0, 0.3, (3, 3, 8, c))
    var = np.ones(c) if identity else rng.uniform(0.5, 2, c)
    gamma = np.sqrt(var + 1e-3) if identity else np.geomspace(1, spread, c)
    consts = {"w": w, "g": gamma, "b": np.zeros(c), "m": np.zeros(c), "v": var}
    nodes = (Node("input", Op.INPUT, (), {"shape": [1, 6, 6, w.shape[2]]}),
             Node("conv", Op.CONV2D, ("input", "w")),
             Node("bn", Op.BATCHNORM, ("conv", "g", "b", "m", "v"), {"epsilon": 1e-3}),
             Node("out", Op.OUTPUT, ("bn",)))
    return Graph(nodes, consts, ("out",))


def _by_scheme(reports):
    return {(r.scheme, r.granularity): r.sqnr_db for r in reports}


def test_identity_bn_schemes_close():
    # equal-range channels: uniform weights, enough taps that every channel's extremes sit near +-0.3
    reps = _by_scheme(compare_schemes(_spread_model(1, identity=True, uniform=True)))
    assert len(reps) == 3
    stacked = np.stack(list(reps.values()))
    assert np.all(stacked.max(axis=0) - stacked.min(axis=0) <= 2.0)


def test_spread_bn_per_channel_dominates():
    g = _spread_model(100)
    reps = _by_scheme(compare_schemes(g))
    pl = reps[("affine", "per_layer")]
    for key in (("symmetric_signed", "per_channel"), ("affine", "per_channel")):
        assert reps[key].mean() > pl.mean() + 5
    same = _by_scheme(compare_schemes(g, schemes=(("affine", "per_layer"), ("affine", "per_channel"))))
    assert np.all(same[("affine", "per_channel")] >= same[("affine", "per_layer")])


def test_empty_model_report():
    g = Graph((Node("input", Op.INPUT, (), {"shape": [1, 2]}), Node("out", Op.OUTPUT, ("input",))), {}, ("out",))
    assert compare_schemes(g) == []


def test_folding_lengthens_power_tail():
    rep = weight_power_report(_spread_model(100))
    assert rep["conv"]["folded"].max_normalized_power > rep["conv"]["unfolded"].max_normalized_power


def test_write_reports(tmp_path):
    g = random_cnn(np.random.default_rng(7))
    reports = compare_schemes(g)
    written = write_reports(reports, tmp_path, weight_power_report(g))
    rows = list(csv.DictReader(open(written["csv"])))
    assert len(rows) == sum(len(r.sqnr_db) for r in reports)
    assert set(rows[0]) == {"layer", "scheme", "granularity", "n_bits", "channel", "sqnr_db"}
    assert len(json.loads(open(written["json"]).read())) == len(reports)
    assert set(json.loads(open(written["power"]).read())) == {"c1", "c2", "fc"}
    assert any(p.name.startswith("sqnr_") for p in (tmp_path / "series").iterdir())
