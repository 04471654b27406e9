import copy
import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import float_conv_loops, textbook_bn
from qtz.qat_train import (BNState, CalibrationStats, DataExhausted, METRIC_COLUMNS, ReferenceCNN, TrainConfig,
                           WeightState, accuracy, backward_update, batches, checkpoint_artifact, compute_gradients,
                           ema_update, eval_graph, forward_train, model_from_artifact, train, update_activation_ranges,
                           update_bn_statistics)
from qtz.graph_ir import run
from qtz.quant_core import QuantParams, Scheme, sim_quant, symmetric_params


def _toy(seed=0, shape=(6, 6, 1), channels=(3,), strides=(1,), classes=3):
    rng = np.random.default_rng(seed)
    m = ReferenceCNN.init(rng, input_shape=shape, channels=channels, strides=strides, pool=2, n_classes=classes)
    for l in m.layers:
        c = l.bn.gamma.shape
        l.bn.moving_mean = rng.normal(0, 0.3, c)
        l.bn.moving_var = rng.uniform(0.5, 2, c)
        l.bn.gamma = rng.uniform(0.5, 1.5, c)
        l.bn.beta = rng.normal(0, 0.2, c)
    x = rng.uniform(0, 1, (4, *shape))
    y = rng.integers(0, classes, 4)
    return m, (x, y)


# -- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(quant_delay=10, freeze_bn_delay=5)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rat": 0.1})
    assert TrainConfig(quant_delay=None).quantizing(10 ** 9) is False
    assert TrainConfig(quant_delay=5).quantizing(5) and not TrainConfig(quant_delay=5).quantizing(4)


# -- statistics ---------------------------------------------------------------

def test_activation_range_first_batch_initializes():
    s = update_activation_ranges(CalibrationStats(momentum=0.9), np.array([-1.0, 0.5, 2.0]))
    assert (s.moving_min, s.moving_max, s.sample_count) == (-1.0, 2.0, 1)


def test_activation_range_constant_stream():
    s = CalibrationStats(momentum=0.9)
    for _ in range(200):
        s = update_activation_ranges(s, np.array([0.0, 6.0]))
    assert (s.moving_min, s.moving_max) == (0.0, pytest.approx(6.0))


def test_activation_range_alternating_limit():
    # two-phase fixed point: a = m*b + (1-m)*1 and b = m*a + (1-m)*3
    # give a = (1 + 3m)/(1 + m) after a 1-batch and b = (3 + m)/(1 + m) after a 3-batch
    m = 0.9
    a_lim, b_lim = (1 + 3 * m) / (1 + m), (3 + m) / (1 + m)
    s = CalibrationStats(momentum=m)
    seen = []
    for i in range(400):
        s = update_activation_ranges(s, np.array([0.0, 1.0 if i % 2 == 0 else 3.0]))
        seen.append(s.moving_max)
    assert seen[-2] == pytest.approx(a_lim, abs=1e-9)
    assert seen[-1] == pytest.approx(b_lim, abs=1e-9)
    assert (seen[-1] + seen[-2]) / 2 == pytest.approx(2.0, abs=1e-9)


def test_range_relaxed_to_zero():
    assert tuple(CalibrationStats(0.5, 2.0, 0.9, 1).range) == (0.0, 2.0)


def _bn(c=2, momentum=0.9):
    return BNState(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), 1e-3, momentum)


def test_bn_momentum_one_never_moves():
    bn = _bn(momentum=1.0)
    for t in range(5):
        bn = update_bn_statistics(bn, (np.full(2, 3.0), np.full(2, 4.0)), t, TrainConfig())
    np.testing.assert_array_equal(bn.moving_mean, 0.0)
    np.testing.assert_array_equal(bn.moving_var, 1.0)


def test_bn_constant_batches_geometric():
    bn = _bn(momentum=0.9)
    for t in range(1, 31):
        bn = update_bn_statistics(bn, (np.full(2, 5.0), np.full(2, 4.0)), t, TrainConfig())
        np.testing.assert_allclose(bn.moving_mean, 5.0 * (1 - 0.9 ** t), rtol=1e-12)
        np.testing.assert_allclose(bn.moving_var, 4.0 + (1 - 4.0) * 0.9 ** t, rtol=1e-12)


def test_bn_freeze_holds_statistics():
    cfg = TrainConfig(quant_delay=0, freeze_bn_delay=3)
    bn = _bn()
    rng = np.random.default_rng(0)
    snaps = []
    for t in range(8):
        bn = update_bn_statistics(bn, (rng.normal(size=2), rng.uniform(1, 2, 2)), t, cfg)
        snaps.append((bn.moving_mean.copy(), bn.moving_var.copy(), bn.frozen))
    assert not snaps[2][2] and all(s[2] for s in snaps[3:])
    for s in snaps[3:]:
        np.testing.assert_array_equal(s[0], snaps[2][0])
        np.testing.assert_array_equal(s[1], snaps[2][1])


# -- EMA --------------------------------------------------------------------

def test_ema_decay_zero_and_convergence():
    w = np.array([1.0, -2.0])
    assert np.array_equal(ema_update(WeightState(w, np.zeros(2)), 0.0).w_ema, w)
    ws = WeightState(w, np.zeros(2))
    for _ in range(2000):
        ws = ema_update(ws, 0.99)
    np.testing.assert_allclose(ws.w_ema, w, rtol=1e-8)


def test_ema_at_code_boundary_differs_by_one_code():
    qp = symmetric_params(1.27, 8, Scheme.SYMMETRIC_SIGNED)  # scale 0.01
    boundary = 0.505  # halfway between codes 50 and 51
    ws = WeightState(np.array([boundary + 1e-6]), np.array([boundary - 1e-6]))
    ws = ema_update(ws, 0.9)
    q_float, q_ema = sim_quant(ws.w_float, qp), sim_quant(ws.w_ema, qp)
    assert abs(ws.w_float[0] - ws.w_ema[0]) < 2e-6
    assert q_float[0] - q_ema[0] == pytest.approx(qp.scale)


# -- forward ----------------------------------------------------------------

def test_delay_gate_gives_float_forward():
    m, batch = _toy()
    l0, c0 = forward_train(copy.deepcopy(m), batch, 0, TrainConfig(quant_delay=5))
    l1, c1 = forward_train(copy.deepcopy(m), batch, 0, TrainConfig(quant_delay=None))
    np.testing.assert_array_equal(c0["logits"], c1["logits"])
    assert l0 == l1


def test_float_forward_is_textbook_batch_norm():
    m, (x, y) = _toy(1)
    _, c = forward_train(m, (x, y), 0, TrainConfig(quant_delay=None))
    l = m.layers[0]
    h = np.maximum(textbook_bn(float_conv_loops(x, l.w, None, 1, "SAME"), l.bn.gamma, l.bn.beta, l.bn.epsilon), 0)
    p = h.reshape(4, 3, 2, 3, 2, 3).mean(axis=(2, 4)).reshape(4, -1)
    np.testing.assert_allclose(c["logits"], p @ m.fc_w + m.fc_b, rtol=1e-12, atol=1e-12)
    # the graph executor in batch-statistics mode agrees bit for bit at float32 output
    g = m.to_graph(dtype=np.float64)
    np.testing.assert_array_equal(run(g, {"input": x}, bn_training=True)["logits"], c["logits"].astype(np.float32))


def test_corrected_and_frozen_agree_when_statistics_match():
    m, (x, y) = _toy(2)
    z = float_conv_loops(x, m.layers[0].w, None, 1, "SAME")
    m.layers[0].bn.moving_mean = z.mean(axis=(0, 1, 2))
    m.layers[0].bn.moving_var = z.var(axis=(0, 1, 2))
    forward_train(m, (x, y), 0, TrainConfig(quant_delay=0))  # initialize ranges
    a = forward_train(m, (x, y), 0, TrainConfig(quant_delay=0), update_stats=False)[1]["logits"]
    b = forward_train(m, (x, y), 0, TrainConfig(quant_delay=0, freeze_bn_delay=0), update_stats=False)[1]["logits"]
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("gran", ["per_channel", "per_layer"])
def test_frozen_forward_matches_eval_graph(gran):
    m, (x, y) = _toy(3, shape=(8, 8, 1), channels=(4, 6), strides=(1, 2))
    cfg = TrainConfig(quant_delay=0, freeze_bn_delay=0, weight_granularity=gran)
    forward_train(m, (x, y), 0, TrainConfig(quant_delay=None))  # seed range statistics
    _, c = forward_train(m, (x, y), 5, cfg)
    ref = run(eval_graph(m, cfg, dtype=np.float64), {"input": x}, dtype=np.float64)["logits"]
    np.testing.assert_allclose(c["logits"], ref, rtol=0, atol=1e-5)


def sim_quant_tensor_ref(w, scale):
    q = np.sign(w / scale) * np.floor(np.abs(w / scale) + 0.5)
    return np.clip(q, -128, 127) * scale


def test_master_weight_purity():
    m, batch = _toy(4)
    cfg = TrainConfig(quant_delay=0)
    _, c = forward_train(m, batch, 0, cfg)
    qp = c["q"].used_params["fc"]
    scale = np.array([p.scale for p in qp])
    # no hidden quantized state: the weights used are a pure function of the float master copy
    np.testing.assert_allclose(c["fcw"], sim_quant_tensor_ref(m.fc_w, scale), rtol=0, atol=1e-15)


# -- gradients --------------------------------------------------------------

@pytest.mark.parametrize("mode, cfg", [
    ("float", TrainConfig(quant_delay=None)),
    ("corrected", TrainConfig(quant_delay=0)),
    ("frozen", TrainConfig(quant_delay=0, freeze_bn_delay=0)),
    ("naive", TrainConfig(quant_delay=0, bn_fold="naive")),
])
def test_gradients_match_finite_differences(mode, cfg):
    m, batch = _toy(0)
    forward_train(m, batch, 0, cfg)
    for k in m.act_stats:  # wide activation ranges: the activation clamps stay inactive
        m.act_stats[k] = CalibrationStats(-50, 50, 0.99, 1)
    _, c = forward_train(m, batch, 0, cfg, surrogate=True, update_stats=False)
    # pin weight quantizer params a little wider so no weight sits on the clamp kink
    wp = {k: [replace(q, scale=q.scale * 1.5) for q in v] for k, v in c["q"].used_params.items()}

    def loss():
        return forward_train(m, batch, 0, cfg, surrogate=True, weight_params=wp, update_stats=False)[0]

    _, c = forward_train(m, batch, 0, cfg, surrogate=True, weight_params=wp, update_stats=False)
    grads = compute_gradients(m, c)
    h = 1e-6
    for k, v in m.params().items():
        for idx in list(np.ndindex(v.shape))[:30]:
            old = v[idx]
            v[idx] = old + h
            lp = loss()
            v[idx] = old - h
            lm = loss()
            v[idx] = old
            fd, an = (lp - lm) / (2 * h), grads[k][idx]
            scale = max(abs(fd), abs(an))
            if scale > 1e-7:
                assert abs(fd - an) / scale < 1e-4, (k, idx, fd, an)


def test_weights_outside_range_get_zero_gradient():
    m, batch = _toy(5)
    cfg = TrainConfig(quant_delay=0)
    forward_train(m, batch, 0, cfg)
    w = m.fc_w
    small = [QuantParams(np.abs(w).max() / 2 / 127, 0, 8, Scheme.SYMMETRIC_SIGNED)]
    _, c = forward_train(m, batch, 0, cfg, weight_params={"fc": small}, update_stats=False)
    g = compute_gradients(m, c)["fc/w"]
    outside = np.abs(w) > small[0].float_range.x_max
    assert outside.any() and (~outside).any()
    np.testing.assert_array_equal(g[outside], 0.0)
    assert np.any(g[~outside] != 0)


def test_update_before_delay_is_plain_sgd():
    m, batch = _toy(6)
    cfg = TrainConfig(quant_delay=100, learning_rate=0.1)
    ref = copy.deepcopy(m)
    _, c = forward_train(m, batch, 0, cfg)
    g = compute_gradients(m, c)
    backward_update(m, c, cfg, 0)
    for k, v in ref.params().items():
        np.testing.assert_array_equal(m.params()[k], v - 0.1 * g[k])


# -- training loop ----------------------------------------------------------

def _data(seed=0, n=64, shape=(8, 8, 1), classes=3):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, n)
    x = rng.uniform(0, 0.2, (n, *shape))
    for i, c in enumerate(y):
        x[i, c * 2:c * 2 + 3, :, 0] += 0.8
    return x, y


def test_total_steps_zero_returns_model_unchanged():
    m, _ = _toy(0, shape=(8, 8, 1))
    out, metrics = train(m, _data(), TrainConfig(total_steps=0))
    assert metrics == []
    for k, v in m.params().items():
        np.testing.assert_array_equal(out.params()[k], v)


def test_data_exhausted():
    with pytest.raises(DataExhausted):
        next(batches(10, 32, np.random.default_rng(0)))


def test_training_is_deterministic_and_learns():
    m = ReferenceCNN.init(np.random.default_rng(0), input_shape=(8, 8, 1), channels=(4,), strides=(1,), n_classes=3)
    data = _data()
    cfg = TrainConfig(quant_delay=20, freeze_bn_delay=60, total_steps=80, batch_size=16, learning_rate=0.1,
                      ema_decay=0.9, eval_every=40)
    a, ma = train(m, data, cfg, eval_data=data)
    b, mb = train(m, data, cfg, eval_data=data)
    for k, v in a.params().items():
        np.testing.assert_array_equal(b.params()[k], v)
    assert [r["loss"] for r in ma] == [r["loss"] for r in mb]
    assert set(ma[0]) == set(METRIC_COLUMNS)
    assert math.isnan(ma[0]["weight_code_churn"]) and not math.isnan(ma[30]["weight_code_churn"])
    assert ma[-1]["bn_frozen"] and not ma[0]["bn_frozen"]
    assert ma[-1]["eval_acc_inst"] > 0.9 and ma[-1]["eval_acc_ema"] > 0.9
    assert a.layers[0].bn.frozen


def test_checkpoint_round_trip():
    m = ReferenceCNN.init(np.random.default_rng(0), input_shape=(8, 8, 1), channels=(4,), strides=(1,), n_classes=3)
    data = _data()
    cfg = TrainConfig(quant_delay=0, total_steps=10, batch_size=16, ema_decay=0.9)
    m, _ = train(m, data, cfg)
    m2 = model_from_artifact(checkpoint_artifact(m, cfg))
    assert m2.step == 10 and m2.act_stats == m.act_stats
    for k, v in m.params().items():
        np.testing.assert_array_equal(m2.params()[k], v.astype(np.float32))
        np.testing.assert_array_equal(m2.ema[k], m.ema[k].astype(np.float32))
    assert accuracy(eval_graph(m2, cfg), *data) == accuracy(eval_graph(m, cfg), *data)
