"""Integer-only inference kernels.

Convolutions use the zero-point decomposition

    acc[n] = sum(w_q * x_q) - z_w[n] * sum(x_q) - z_x * sum_w[n] + K * z_x * z_w[n] + bias[n]

where the last three weight-only terms are precomputed in :class:`QConvPlan`
and ``sum(x_q)`` is computed once per output position and shared by every
output channel. Accumulators are int32; the int8 x int8 dot products run on a
float64 BLAS matmul, which is exact because every partial sum stays far below
2**53.

Requantization uses a normalized int32 mantissa and a right shift with a
64-bit intermediate product, rounding half away from zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .quant_core import QuantParams, quantize, round_half_away

INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1
ADD_LEFT_SHIFT = 20


class KernelError(ValueError):
    pass


class MultiplierOutOfRange(KernelError):
    pass


class AccumulatorOverflow(KernelError):
    pass


class ShapeMismatch(KernelError):
    pass


@dataclass(frozen=True)
class RequantSpec:
    """``M ~= m0 / 2**31 * 2**-shift``; ``shift`` may be negative when ``M >= 1``."""

    m0: np.ndarray
    shift: np.ndarray

    @property
    def multiplier(self) -> np.ndarray:
        return self.m0 / 2.0 ** 31 * 2.0 ** (-self.shift.astype(np.float64))


def quantize_multiplier(m) -> RequantSpec:
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    m0 = np.zeros(m.shape, dtype=np.int64)
    shift = np.zeros(m.shape, dtype=np.int64)
    for i, v in enumerate(m):
        if not v > 0:
            raise MultiplierOutOfRange(f"multiplier must be positive, got {v}")
        mant, exp = math.frexp(v)  # v = mant * 2**exp, mant in [0.5, 1)
        q = int(round(mant * (1 << 31)))
        if q == 1 << 31:
            q //= 2
            exp += 1
        m0[i], shift[i] = q, -exp
    return RequantSpec(m0, shift)


def rounding_shift(p: np.ndarray, total) -> np.ndarray:
    """``round_half_away(p / 2**total)`` for int64 ``p`` and shift ``total >= 1``."""
    total = np.asarray(total, dtype=np.int64)
    a = np.abs(p)
    r = (a + (np.int64(1) << (total - 1))) >> total
    return np.where(p < 0, -r, r)


def multiply_by_quantized(acc, rs: RequantSpec, axis: int = -1) -> np.ndarray:
    """Fixed-point ``acc * M`` (per channel along ``axis``), no offset, no clamp."""
    acc = np.asarray(acc, dtype=np.int64)
    shape = [1] * acc.ndim
    if acc.ndim and rs.m0.size > 1:
        shape[axis] = rs.m0.size
    m0 = rs.m0.reshape(shape) if acc.ndim else rs.m0[0]
    shift = rs.shift.reshape(shape) if acc.ndim else rs.shift[0]
    total = 31 + shift
    if np.any(total < 1):
        raise MultiplierOutOfRange("multiplier too large for the fixed-point representation")
    return rounding_shift(acc * m0, total)


def requantize(acc, rs: RequantSpec, z_y: int, lo: int = 0, hi: int = 255, axis: int = -1):
    out = np.clip(multiply_by_quantized(acc, rs, axis) + z_y, lo, hi)
    return int(out) if np.ndim(acc) == 0 else out


# ---------------------------------------------------------------------------
# convolution / fully connected
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QConvPlan:
    kind: str  # "conv", "depthwise" or "fc"
    w_q: np.ndarray
    z_w: np.ndarray
    z_x: int
    weight_col_sums: np.ndarray
    offset: np.ndarray  # K*z_x*z_w - z_x*weight_col_sums, per output channel
    bias_i32: np.ndarray
    requant: RequantSpec
    z_y: int
    out_lo: int
    out_hi: int
    stride: int = 1
    padding: str = "SAME"
    qp_x: QuantParams | None = None
    qp_y: QuantParams | None = None
    qp_w: tuple = field(default=())

    @property
    def symmetric_weights(self) -> bool:
        return not np.any(self.z_w)

    @property
    def taps(self) -> int:
        """Number of products per accumulator (the K in K*z_x*z_w)."""
        if self.kind == "fc":
            return self.w_q.shape[0]
        if self.kind == "depthwise":
            return self.w_q.shape[0] * self.w_q.shape[1]
        return int(np.prod(self.w_q.shape[:3]))


def _out_channel_view(w_q: np.ndarray, kind: str) -> np.ndarray:
    if kind == "depthwise":
        return w_q.reshape(w_q.shape[0] * w_q.shape[1], -1)
    return w_q.reshape(-1, w_q.shape[-1])


def activation_clamp(qp_y: QuantParams, activation: str | None) -> tuple[int, int]:
    lo, hi = qp_y.code_range
    if activation in ("relu", "relu6"):
        lo = max(lo, qp_y.zero_point)
    if activation == "relu6":
        hi = min(hi, quantize(6.0, qp_y))
    return lo, hi


def plan_qconv(w_q, qp_w: Sequence[QuantParams], qp_x: QuantParams, qp_y: QuantParams, bias_float=None,
               kind: str = "conv", stride: int = 1, padding: str = "SAME",
               activation: str | None = None) -> QConvPlan:
    """Precompute every weight-only term of the integer convolution.

    ``qp_w`` holds one entry (per layer) or one per output channel.
    ``activation`` ("relu"/"relu6") is fused into the output clamp.
    """
    w_q = np.asarray(w_q, dtype=np.int64)
    cols = _out_channel_view(w_q, kind)
    cout = cols.shape[1]
    qp_w = list(qp_w)
    if len(qp_w) == 1:
        qp_w = qp_w * cout
    if len(qp_w) != cout:
        raise ShapeMismatch(f"{len(qp_w)} weight params for {cout} output channels")
    lo, hi = qp_w[0].code_range
    if w_q.size and (w_q.min() < lo or w_q.max() > hi):
        raise KernelError("weight codes outside their code range")
    z_w = np.array([p.zero_point for p in qp_w], dtype=np.int64)
    s_w = np.array([p.scale for p in qp_w], dtype=np.float64)
    col_sums = cols.sum(axis=0)
    taps = cols.shape[0]
    offset = taps * qp_x.zero_point * z_w - qp_x.zero_point * col_sums
    acc_scale = s_w * qp_x.scale
    if bias_float is None:
        bias_i32 = np.zeros(cout, dtype=np.int64)
    else:
        b = round_half_away(np.asarray(bias_float, dtype=np.float64) / acc_scale)
        bias_i32 = np.clip(b, INT32_MIN, INT32_MAX).astype(np.int64)
    mult = acc_scale / qp_y.scale
    if np.any(mult >= 1.0):
        raise MultiplierOutOfRange(f"requantization multiplier {mult.max():.4g} >= 1; check calibration ranges")
    out_lo, out_hi = activation_clamp(qp_y, activation)
    return QConvPlan(kind, w_q, z_w, qp_x.zero_point, col_sums, offset, bias_i32, quantize_multiplier(mult),
                     qp_y.zero_point, out_lo, out_hi, stride, padding, qp_x, qp_y, tuple(qp_w))


def _check_acc(acc):
    if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
        raise AccumulatorOverflow("int32 accumulator overflow")


def qconv_accumulate(plan: QConvPlan, x_q, force_general: bool = False) -> np.ndarray:
    """int32 accumulators (before requantization) for ``plan`` applied to ``x_q``."""
    x_q = np.asarray(x_q, dtype=np.int64)
    fast = plan.symmetric_weights and not force_general
    if plan.kind == "fc":
        x2 = x_q.reshape(x_q.shape[0], -1)
        if x2.shape[1] != plan.w_q.shape[0]:
            raise ShapeMismatch(f"fc expects {plan.w_q.shape[0]} features, got {x2.shape[1]}")
        acc = (x2.astype(np.float64) @ plan.w_q.astype(np.float64)).astype(np.int64)
        if not fast:
            acc -= plan.z_w * x2.sum(axis=1, keepdims=True)
    else:
        kh, kw = plan.w_q.shape[:2]
        if x_q.ndim != 4 or x_q.shape[3] != plan.w_q.shape[2]:
            raise ShapeMismatch(f"input {x_q.shape} does not match weights {plan.w_q.shape}")
        cols = nn.im2col(x_q, kh, kw, plan.stride, plan.padding, pad_value=plan.z_x)
        n, ho, wo = cols.shape[:3]
        if plan.kind == "depthwise":
            c, mult = plan.w_q.shape[2:]
            colsf = cols.reshape(n * ho * wo, kh * kw, c)
            acc = np.einsum("pkc,kcm->pcm", colsf.astype(np.float64),
                            plan.w_q.reshape(kh * kw, c, mult).astype(np.float64), optimize=True)
            acc = acc.astype(np.int64)
            if not fast:
                xsum = colsf.sum(axis=1)  # per position and input channel
                acc -= plan.z_w.reshape(c, mult) * xsum[:, :, None]
            acc = acc.reshape(n, ho, wo, c * mult)
        else:
            cols2 = cols.reshape(n * ho * wo, -1)
            acc = (cols2.astype(np.float64) @ plan.w_q.reshape(-1, plan.w_q.shape[-1]).astype(np.float64))
            acc = acc.astype(np.int64)
            if not fast:
                xsum = cols2.sum(axis=1, keepdims=True)  # shared by all output channels
                acc -= plan.z_w * xsum
            acc = acc.reshape(n, ho, wo, -1)
    acc = acc + plan.offset + plan.bias_i32
    _check_acc(acc)
    return acc


def qconv2d(plan: QConvPlan, x_q, force_general: bool = False) -> np.ndarray:
    acc = qconv_accumulate(plan, x_q, force_general)
    return requantize(acc, plan.requant, plan.z_y, plan.out_lo, plan.out_hi)


qfully_connected = qconv2d


def max_abs_accumulator(taps: int, n_bits: int = 8) -> int:
    """Worst-case |dot product| for ``taps`` products of signed/unsigned codes."""
    return taps * (1 << n_bits) * (1 << (n_bits - 1))


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def qadd(a_q, qp_a: QuantParams, b_q, qp_b: QuantParams, qp_y: QuantParams, activation: str | None = None):
    a_q = np.asarray(a_q, dtype=np.int64)
    b_q = np.asarray(b_q, dtype=np.int64)
    if a_q.shape != b_q.shape:
        raise ShapeMismatch(f"qadd of {a_q.shape} and {b_q.shape}")
    twice_max = 2.0 * max(qp_a.scale, qp_b.scale)
    ra = quantize_multiplier(qp_a.scale / twice_max)
    rb = quantize_multiplier(qp_b.scale / twice_max)
    ry = quantize_multiplier(twice_max / ((1 << ADD_LEFT_SHIFT) * qp_y.scale))
    sa = multiply_by_quantized((a_q - qp_a.zero_point) << ADD_LEFT_SHIFT, ra)
    sb = multiply_by_quantized((b_q - qp_b.zero_point) << ADD_LEFT_SHIFT, rb)
    lo, hi = activation_clamp(qp_y, activation)
    return np.clip(multiply_by_quantized(sa + sb, ry) + qp_y.zero_point, lo, hi)


def rescale_codes(x_q, qp_in: QuantParams, qp_out: QuantParams) -> np.ndarray:
    """Code-to-code conversion between two quantizers of the same tensor."""
    x_q = np.asarray(x_q, dtype=np.int64)
    if qp_in == qp_out:
        return x_q.copy()
    rs = quantize_multiplier(qp_in.scale / qp_out.scale)
    lo, hi = qp_out.code_range
    return np.clip(multiply_by_quantized(x_q - qp_in.zero_point, rs) + qp_out.zero_point, lo, hi)


def qconcat(inputs: Sequence[tuple[np.ndarray, QuantParams]], axis: int, qp_y: QuantParams) -> np.ndarray:
    if not inputs:
        raise ShapeMismatch("qconcat needs at least one input")
    parts = [rescale_codes(t, qp, qp_y) for t, qp in inputs]
    try:
        return np.concatenate(parts, axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None


def qrelu(x_q, qp: QuantParams) -> np.ndarray:
    return np.clip(np.asarray(x_q, dtype=np.int64), qp.zero_point, qp.qmax)


def qrelu6(x_q, qp: QuantParams) -> np.ndarray:
    lo, hi = activation_clamp(qp, "relu6")
    return np.clip(np.asarray(x_q, dtype=np.int64), lo, hi)


def qavgpool(x_q, qp_x: QuantParams, qp_y: QuantParams, k: int, stride: int | None = None) -> np.ndarray:
    stride = stride or k
    x_q = np.asarray(x_q, dtype=np.int64)
    win = np.lib.stride_tricks.sliding_window_view(x_q, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    acc = win.sum(axis=(-2, -1)) - k * k * qp_x.zero_point
    rs = quantize_multiplier(qp_x.scale / (qp_y.scale * k * k))
    lo, hi = qp_y.code_range
    return np.clip(multiply_by_quantized(acc, rs) + qp_y.zero_point, lo, hi)
