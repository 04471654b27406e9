"""Batch-norm folding during quantized fine-tuning: naive folding versus correction and freezing.

Folding with the current batch's sigma makes the quantized weights move every step
even when the float weights barely change. Folding with the long-term sigma and
correcting the output, then freezing the statistics, keeps the codes still.
Per-layer weights are used: per-channel steps absorb the per-channel sigma factor.
"""
import numpy as np

from qtz import data
from qtz.qat_train import ReferenceCNN, TrainConfig, train

xtr, ytr, xte, yte = data.mnist_subset(seed=0)
xtr, xte = data.to_float(xtr), data.to_float(xte)
fm, _ = train(ReferenceCNN.init(np.random.default_rng(0)), (xtr, ytr),
              TrainConfig(learning_rate=0.1, weight_decay=5e-4, quant_delay=None, total_steps=3000, rng_seed=0))

steps, start = 600, fm.step
common = dict(learning_rate=0.01, weight_decay=5e-4, quant_delay=0, total_steps=steps, rng_seed=1,
              weight_granularity="per_layer", batch_size=8, bn_momentum=0.9)
_, naive = train(fm, (xtr, ytr), TrainConfig(bn_fold="naive", **common))
_, fixed = train(fm, (xtr, ytr), TrainConfig(freeze_bn_delay=start + steps // 2, **common),
                 eval_data=(xte, yte), eval_every=10)

for name, rows in (("naive", naive), ("corrected+freeze", fixed)):
    churn = [r["weight_code_churn"] for r in rows]
    print(f"{name:17s} mean fraction of weight codes changing per step: {np.nanmean(churn):.4f}")
evals = [(r["step"], r["eval_acc_inst"]) for r in fixed if not np.isnan(r["eval_acc_inst"])]
freeze = start + steps // 2
for label, keep in (("before freeze", lambda s: s < freeze), ("after freeze", lambda s: s >= freeze)):
    a = np.array([acc for s, acc in evals if keep(s)])
    print(f"eval accuracy {label:13s}: mean {a.mean():.4f}  std {a.std():.4f}")
