"""Uniform quantizers: parameter derivation, (de)quantization, fake-quant and STE.

Everything here is a pure numpy function. Scalars and arrays are both accepted;
codes come back as ``int64`` arrays (or Python ints for scalar input).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

# widening applied to all-constant tensors so that scale stays positive
DEGENERATE_EPS = 1e-6
# spans below this are treated as empty (their scale would underflow)
MIN_SPAN = 1e-30


class QuantError(ValueError):
    pass


class DegenerateRange(QuantError):
    pass


class CodeOutOfRange(QuantError):
    pass


class Scheme(str, enum.Enum):
    AFFINE = "affine"
    SYMMETRIC_SIGNED = "symmetric_signed"
    SYMMETRIC_UNSIGNED = "symmetric_unsigned"

    @property
    def is_symmetric(self) -> bool:
        return self is not Scheme.AFFINE


class RangeSpec(NamedTuple):
    x_min: float
    x_max: float


@dataclass(frozen=True)
class Granularity:
    """``per_channel`` quantizes each slice along ``axis`` with its own params."""

    per_channel: bool = False
    axis: int = -1

    @classmethod
    def per_layer(cls) -> "Granularity":
        return cls(False)

    @classmethod
    def channel(cls, axis: int = -1) -> "Granularity":
        return cls(True, axis)

    def __str__(self):
        return "per_channel" if self.per_channel else "per_layer"

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        text = text.replace("-", "_").lower()
        if text in ("per_channel", "channel"):
            return cls.channel()
        if text in ("per_layer", "layer", "per_tensor"):
            return cls.per_layer()
        raise ValueError(f"unknown granularity {text!r}")


PER_LAYER = Granularity.per_layer()
PER_CHANNEL = Granularity.channel()


def code_range(n_bits: int, scheme: Scheme, narrow_range: bool = False) -> tuple[int, int]:
    levels = 1 << n_bits
    if scheme is Scheme.SYMMETRIC_SIGNED:
        hi = levels // 2 - 1
        return (-hi if narrow_range else -levels // 2), hi
    if scheme is Scheme.SYMMETRIC_UNSIGNED:
        return 0, levels - 2 if narrow_range else levels - 1
    # narrow_range has no meaning for the affine quantizer
    return 0, levels - 1


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    n_bits: int = 8
    scheme: Scheme = Scheme.AFFINE
    narrow_range: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))
        if self.n_bits not in (4, 8, 16):
            raise QuantError(f"n_bits must be 4, 8 or 16, got {self.n_bits}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise QuantError(f"scale must be positive and finite, got {self.scale}")
        lo, hi = self.code_range
        if self.scheme is Scheme.AFFINE:
            if not lo <= self.zero_point <= hi:
                raise QuantError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")
        elif self.zero_point != 0:
            raise QuantError("symmetric quantizers require zero_point == 0")

    @property
    def code_range(self) -> tuple[int, int]:
        return code_range(self.n_bits, self.scheme, self.narrow_range)

    @property
    def qmin(self) -> int:
        return self.code_range[0]

    @property
    def qmax(self) -> int:
        return self.code_range[1]

    @property
    def float_range(self) -> RangeSpec:
        """Real interval covered by the code range (the STE clamp interval)."""
        lo, hi = self.code_range
        return RangeSpec((lo - self.zero_point) * self.scale, (hi - self.zero_point) * self.scale)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "zero_point": self.zero_point,
            "n_bits": self.n_bits,
            "scheme": self.scheme.value,
            "narrow_range": self.narrow_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(d["scale"], d["zero_point"], d["n_bits"], Scheme(d["scheme"]), d["narrow_range"])


def round_half_away(x):
    """Round to nearest, ties away from zero. Exact for every float input."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    # a - f is exact for floats with a fractional part
    r = f + (a - f >= 0.5)
    return np.copysign(r, x)


def _as_output(codes, like):
    if np.ndim(like) == 0:
        return int(codes)
    return codes


def relax_range(r: RangeSpec) -> RangeSpec:
    x_min, x_max = r
    if x_min > x_max:
        raise QuantError(f"invalid range ({x_min}, {x_max})")
    return RangeSpec(min(float(x_min), 0.0), max(float(x_max), 0.0))


def widen_degenerate(r: RangeSpec, eps: float = DEGENERATE_EPS) -> RangeSpec:
    """Widen an empty range so that its scale is positive; others pass through."""
    if r.x_max > r.x_min:
        return r
    x = r.x_min
    return RangeSpec(min(0.0, x) - eps, max(0.0, x) + eps)


def affine_params(r: RangeSpec, n_bits: int = 8) -> QuantParams:
    x_min, x_max = float(r.x_min), float(r.x_max)
    if x_min > 0 or x_max < 0:
        raise QuantError("range must include zero; call relax_range first")
    if x_max == x_min:
        raise DegenerateRange(f"empty range ({x_min}, {x_max})")
    steps = (1 << n_bits) - 1
    scale = (x_max - x_min) / steps
    # computed without the rounded scale so that exact halves stay halves
    z = round_half_away(-x_min * steps / (x_max - x_min))
    z = int(min(max(z, 0), steps))
    return QuantParams(scale, z, n_bits, Scheme.AFFINE)


def symmetric_params(max_abs: float, n_bits: int = 8,
                     scheme: Scheme = Scheme.SYMMETRIC_SIGNED,
                     narrow_range: bool = False) -> QuantParams:
    scheme = Scheme(scheme)
    if not scheme.is_symmetric:
        raise QuantError("symmetric_params needs a symmetric scheme")
    max_abs = float(max_abs)
    if max_abs == 0:
        raise DegenerateRange("max_abs is zero")
    if max_abs < 0:
        raise QuantError("max_abs must be non-negative")
    hi = code_range(n_bits, scheme, narrow_range)[1]
    return QuantParams(max_abs / hi, 0, n_bits, scheme, narrow_range)


def params_from_range(r: RangeSpec, n_bits: int = 8, scheme: Scheme = Scheme.AFFINE,
                      narrow_range: bool = False) -> QuantParams:
    """Relax, widen if empty, then derive params for ``scheme``."""
    r = relax_range(r)
    if r.x_max - r.x_min < MIN_SPAN:
        r = widen_degenerate(RangeSpec(r.x_min, r.x_min))
    scheme = Scheme(scheme)
    if scheme is Scheme.AFFINE:
        return affine_params(r, n_bits)
    if scheme is Scheme.SYMMETRIC_UNSIGNED:
        # unsigned codes cannot carry negative values; only the top matters
        return symmetric_params(r.x_max if r.x_max > 0 else DEGENERATE_EPS, n_bits, scheme, narrow_range)
    return symmetric_params(max(-r.x_min, r.x_max), n_bits, scheme, narrow_range)


def _quantize_raw(x, scale, zero_point, lo, hi):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        q = x / scale
    # clamp before rounding so huge ratios (or inf) cannot overflow the int cast
    q = np.clip(q, lo - zero_point - 1, hi - zero_point + 1)
    codes = round_half_away(q) + zero_point
    return np.clip(codes, lo, hi).astype(np.int64)


def quantize(x, qp: QuantParams):
    lo, hi = qp.code_range
    return _as_output(_quantize_raw(x, qp.scale, qp.zero_point, lo, hi), x)


def dequantize(code, qp: QuantParams):
    c = np.asarray(code)
    lo, hi = qp.code_range
    if c.size and (c.min() < lo or c.max() > hi):
        raise CodeOutOfRange(f"codes outside [{lo}, {hi}]")
    out = (c.astype(np.int64) - qp.zero_point) * qp.scale
    return float(out) if np.ndim(code) == 0 else out


def quantize_stochastic(x, qp: QuantParams, rng: np.random.Generator, dither: str = "code"):
    """Additive-noise quantizer: uniform noise in (-1/2, 1/2) before rounding.

    ``dither="code"`` scales the noise by the step so it spans exactly one code;
    the dequantized mean is then ``clamp(x)``. ``dither="value"`` adds the noise
    in input units, unscaled, which is only unbiased when the step divides 1.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = rng.uniform(-0.5, 0.5, size=x.shape)
    if dither == "code":
        noisy = x + eps * qp.scale
    elif dither == "value":
        noisy = x + eps
    else:
        raise ValueError(f"unknown dither mode {dither!r}")
    lo, hi = qp.code_range
    return _as_output(_quantize_raw(noisy, qp.scale, qp.zero_point, lo, hi), x)


def sim_quant(x, qp: QuantParams):
    lo, hi = qp.code_range
    codes = _quantize_raw(x, qp.scale, qp.zero_point, lo, hi)
    out = (codes - qp.zero_point) * qp.scale
    return float(out) if np.ndim(x) == 0 else out


def sim_quant_backward(x, r: RangeSpec, upstream_grad):
    """Straight-through gradient: pass ``upstream_grad`` where x lies in r."""
    x = np.asarray(x, dtype=np.float64)
    inside = (x >= r.x_min) & (x <= r.x_max)
    out = np.where(inside, upstream_grad, 0.0)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# tensor level
# ---------------------------------------------------------------------------

def _slices_minmax(t: np.ndarray, granularity: Granularity):
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise QuantError("cannot quantize an empty tensor")
    if not granularity.per_channel:
        return np.array([t.min()]), np.array([t.max()])
    moved = np.moveaxis(t, granularity.axis, -1).reshape(-1, t.shape[granularity.axis])
    return moved.min(axis=0), moved.max(axis=0)


def tensor_params(t, granularity: Granularity = PER_LAYER, scheme: Scheme = Scheme.AFFINE,
                  n_bits: int = 8, narrow_range: bool = False) -> list[QuantParams]:
    """Params from the actual min/max of ``t`` (one entry, or one per channel)."""
    mins, maxs = _slices_minmax(t, granularity)
    return [params_from_range(RangeSpec(a, b), n_bits, scheme, narrow_range) for a, b in zip(mins, maxs)]


class ChannelParams(NamedTuple):
    """Broadcastable per-element arrays built from a list of QuantParams."""

    scale: np.ndarray
    zero_point: np.ndarray
    lo: int
    hi: int


def broadcast_params(params: Sequence[QuantParams], ndim: int, axis: int = -1) -> ChannelParams:
    shape = [1] * ndim
    if len(params) > 1:
        shape[axis] = len(params)
    scale = np.array([p.scale for p in params], dtype=np.float64).reshape(shape)
    zp = np.array([p.zero_point for p in params], dtype=np.int64).reshape(shape)
    lo, hi = params[0].code_range
    return ChannelParams(scale, zp, lo, hi)


def quantize_tensor(t, granularity: Granularity = PER_LAYER, scheme: Scheme = Scheme.AFFINE,
                    n_bits: int = 8, narrow_range: bool = False):
    """Return ``(codes, params)``; params has one entry per channel when per-channel."""
    t = np.asarray(t, dtype=np.float64)
    params = tensor_params(t, granularity, scheme, n_bits, narrow_range)
    cp = broadcast_params(params, t.ndim, granularity.axis)
    return _quantize_raw(t, cp.scale, cp.zero_point, cp.lo, cp.hi), params


def quantize_with(t, params: Sequence[QuantParams], axis: int = -1):
    cp = broadcast_params(params, np.ndim(t), axis)
    return _quantize_raw(t, cp.scale, cp.zero_point, cp.lo, cp.hi)


def dequantize_with(codes, params: Sequence[QuantParams], axis: int = -1):
    cp = broadcast_params(params, np.ndim(codes), axis)
    c = np.asarray(codes, dtype=np.int64)
    if c.size and (c.min() < cp.lo or c.max() > cp.hi):
        raise CodeOutOfRange(f"codes outside [{cp.lo}, {cp.hi}]")
    return (c - cp.zero_point) * cp.scale


def fake_quant_tensor(t, params: Sequence[QuantParams], axis: int = -1):
    """Fake-quantize ``t`` and return ``(values, in_range_mask)`` for the STE."""
    t = np.asarray(t, dtype=np.float64)
    cp = broadcast_params(params, t.ndim, axis)
    codes = _quantize_raw(t, cp.scale, cp.zero_point, cp.lo, cp.hi)
    out = (codes - cp.zero_point) * cp.scale
    lo_f = (cp.lo - cp.zero_point) * cp.scale
    hi_f = (cp.hi - cp.zero_point) * cp.scale
    return out, (t >= lo_f) & (t <= hi_f)


def sim_quant_tensor(t, granularity: Granularity = PER_LAYER, scheme: Scheme = Scheme.AFFINE,
                     n_bits: int = 8, narrow_range: bool = False):
    params = tensor_params(t, granularity, scheme, n_bits, narrow_range)
    return fake_quant_tensor(t, params, granularity.axis)[0], params


def params_list_to_dict(params: Iterable[QuantParams], axis: int | None = None) -> dict:
    """Compact form: shared fields once, per-channel scales and zero-points as lists."""
    params = list(params)
    p0 = params[0]
    return {
        "scheme": p0.scheme.value,
        "n_bits": p0.n_bits,
        "narrow_range": p0.narrow_range,
        "axis": axis,
        "scale": [p.scale for p in params],
        "zero_point": [p.zero_point for p in params],
    }


def params_list_from_dict(d: dict) -> list[QuantParams]:
    return [QuantParams(s, z, d["n_bits"], Scheme(d["scheme"]), d["narrow_range"])
            for s, z in zip(d["scale"], d["zero_point"])]
