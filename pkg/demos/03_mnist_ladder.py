"""Accuracy ladder on the bundled 5000-image MNIST sample (about 4 minutes on one core).

Trains the float reference CNN, then compares integer-only inference after
post-training quantization (PTQ) and after quantization-aware fine-tuning (QAT),
at 8 and 4 weight bits. Activations stay 8-bit throughout.
"""
import time

import numpy as np

from qtz import data, ptq
from qtz.graph_ir import fold_bn_eval
from qtz.qat_train import ReferenceCNN, TrainConfig, accuracy, eval_graph, train

xtr, ytr, xte, yte = data.mnist_subset(seed=0)
xtr, xte = data.to_float(xtr), data.to_float(xte)


def int_accuracy(g, ranges, cfg):
    model = ptq.convert(g, ranges, cfg)
    return float(np.mean(model.predict(xte).argmax(axis=1) == yte))


t0 = time.perf_counter()
float_cfg = TrainConfig(learning_rate=0.1, weight_decay=5e-4, quant_delay=None, total_steps=3000, rng_seed=0)
fm, _ = train(ReferenceCNN.init(np.random.default_rng(0)), (xtr, ytr), float_cfg)
rows = [("float", accuracy(eval_graph(fm, None, quantized=False), xte, yte))]
print(f"float baseline trained in {time.perf_counter() - t0:.0f}s")

g = fold_bn_eval(fm.to_graph())
for name, cfg in [("PTQ  8-bit per-channel", ptq.PTQConfig()),
                  ("PTQ  8-bit per-layer", ptq.PTQConfig(weight_scheme="affine", weight_granularity="per_layer")),
                  ("PTQ  4-bit per-channel", ptq.PTQConfig(weight_bits=4)),
                  ("PTQ  4-bit per-layer", ptq.PTQConfig(weight_bits=4, weight_scheme="affine",
                                                         weight_granularity="per_layer"))]:
    ranges = ptq.calibrate(g, ptq.batch_iter(xtr, 32), cfg)
    rows.append((name, int_accuracy(g, ranges, cfg)))

steps = 600
for bits in (8, 4):
    cfg = TrainConfig(learning_rate=0.01, weight_decay=5e-4, quant_delay=0, freeze_bn_delay=fm.step + steps // 2,
                      weight_bits=bits, total_steps=steps, rng_seed=1)
    qm, _ = train(fm, (xtr, ytr), cfg)
    rows.append((f"QAT  {bits}-bit per-channel", int_accuracy(fold_bn_eval(qm.to_graph()), qm.ranges(),
                                                              ptq.PTQConfig(weight_bits=bits))))

for name, a in rows:
    print(f"{name:24s} {a:.3f}")
