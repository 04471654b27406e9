"""Why per-channel weights matter once batch norm is folded into the convolution.

A conv layer followed by batch norm with a 100x spread of gamma is folded; the
folded weights inherit that spread. One step for the whole tensor wipes out the
small channels, while one step per channel keeps them.
"""
import numpy as np

from qtz.analysis import compare_schemes, weight_power_report
from qtz.graph_ir import Graph, Node, Op

rng = np.random.default_rng(0)
c = 8
consts = {"w": rng.normal(0, 0.3, (3, 3, 16, c)), "g": np.geomspace(1, 100, c), "b": np.zeros(c),
          "m": np.zeros(c), "v": np.ones(c)}
g = Graph((Node("input", Op.INPUT, (), {"shape": [1, 8, 8, 16]}), Node("conv", Op.CONV2D, ("input", "w")),
           Node("bn", Op.BATCHNORM, ("conv", "g", "b", "m", "v"), {"epsilon": 1e-3}),
           Node("out", Op.OUTPUT, ("bn",))), consts, ("out",))

print("gamma per channel:", np.round(consts["g"], 1))
for rep in compare_schemes(g):
    print(f"{rep.scheme:17s} {rep.granularity:12s}", np.round(rep.sqnr_db, 1))

power = weight_power_report(g)["conv"]
print(f"max normalized weight power: unfolded {power['unfolded'].max_normalized_power:.1f}, "
      f"folded {power['folded'].max_normalized_power:.1f}")
