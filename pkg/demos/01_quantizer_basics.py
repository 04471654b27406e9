"""Walk through the quantizer: parameters, codes, saturation and the straight-through gradient."""
import numpy as np

from qtz.quant_core import (PER_CHANNEL, PER_LAYER, RangeSpec, Scheme, dequantize, params_from_range, quantize,
                            quantize_stochastic, quantize_tensor, sim_quant, sim_quant_backward)

# An asymmetric 8-bit quantizer for activations observed in [-1, 3].
qp = params_from_range(RangeSpec(-1.0, 3.0), n_bits=8)
print(f"affine: scale={qp.scale:.6f} zero_point={qp.zero_point} codes={qp.code_range}")

x = np.array([-2.0, -1.0, 0.0, 0.013, 1.0, 3.0, 7.5])
codes = quantize(x, qp)
print("x        ", x)
print("codes    ", codes)
print("dequant  ", np.round(dequantize(codes, qp), 5), "(0.0 comes back exactly; out-of-range values clamp)")

# Symmetric weights: zero point fixed at 0, one step per output channel.
w = np.stack([np.linspace(-0.01, 0.01, 9), np.linspace(-1.0, 1.0, 9)], axis=-1)
for gran in (PER_LAYER, PER_CHANNEL):
    c, params = quantize_tensor(w, gran, Scheme.SYMMETRIC_SIGNED)
    print(f"{str(gran):12s} small-channel codes: {c[:, 0].tolist()}")

# The backward pass treats the quantizer as a clamp to its float range.
lo, hi = qp.float_range
print("STE gradient:", sim_quant_backward(x, RangeSpec(lo, hi), np.ones_like(x)))

# Stochastic rounding is unbiased on average.
rng = np.random.default_rng(0)
v = 0.4567
draws = dequantize(quantize_stochastic(np.full(100_000, v), qp, rng), qp)
print(f"stochastic mean {draws.mean():.5f} vs x={v} (deterministic gives {sim_quant(v, qp):.5f})")
