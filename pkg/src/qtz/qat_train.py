"""Quantization-aware training of the reference CNN with explicit backprop.

The model is ``[Conv3x3 -> BN -> ReLU] x L -> AvgPool -> FC``. Master weights
stay in float; forward passes use fake-quantized weights and activations once
``step >= quant_delay``, and gradients pass the quantizers straight through
inside their ranges.

Batch norm during quantized training is folded into the conv weights in one of
two ways:

``corrected``
    weights are folded with the long-term sigma (no batch-to-batch jitter).
    Before ``freeze_bn_delay`` the conv output is divided by
    ``c = sigma_B / sigma`` so the block equals textbook batch norm; afterwards
    the moving statistics freeze and the block matches inference folding.
``naive``
    weights are folded with the batch sigma every step.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .graph_ir import (Graph, Node, Op, QuantConfig, fold_bn_eval, insert_fake_quant, run,
                       set_activation_ranges)
from .quant_core import (Granularity, QuantParams, RangeSpec, Scheme, fake_quant_tensor, params_from_range,
                         tensor_params)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class DataExhausted(TrainingError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    quant_delay: int | None = 0  # None: never quantize
    freeze_bn_delay: int | None = None  # None: never freeze
    ema_decay: float | None = None
    stochastic_weights: bool = False
    weight_scheme: str = "symmetric_signed"
    weight_granularity: str = "per_channel"
    weight_bits: int = 8
    weight_narrow_range: bool = False
    activation_bits: int = 8
    batch_size: int = 32
    total_steps: int = 1000
    rng_seed: int = 0
    bn_fold: str = "corrected"
    bn_momentum: float = 0.99
    range_momentum: float = 0.99
    eval_every: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.quant_delay is not None and not 0 <= self.quant_delay:
            raise ValueError("quant_delay must be >= 0")
        if self.freeze_bn_delay is not None and self.quant_delay is not None \
                and self.freeze_bn_delay < self.quant_delay:
            raise ValueError("freeze_bn_delay must be >= quant_delay")
        if self.ema_decay is not None and not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.bn_fold not in ("corrected", "naive"):
            raise ValueError(f"bn_fold must be 'corrected' or 'naive', got {self.bn_fold!r}")
        if self.weight_bits not in (4, 8, 16) or self.activation_bits not in (4, 8, 16):
            raise ValueError("bit widths must be 4, 8 or 16")
        Scheme(self.weight_scheme)
        Granularity.parse(self.weight_granularity)

    @property
    def quant_config(self) -> QuantConfig:
        return QuantConfig(Scheme(self.weight_scheme), Granularity.parse(self.weight_granularity),
                           self.weight_bits, self.weight_narrow_range, self.activation_bits)

    def quantizing(self, step: int) -> bool:
        return self.quant_delay is not None and step >= self.quant_delay

    def bn_frozen(self, step: int) -> bool:
        return self.freeze_bn_delay is not None and step >= self.freeze_bn_delay

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    frozen: bool = False

    @property
    def moving_std(self) -> np.ndarray:
        return np.sqrt(self.moving_var + self.epsilon)

    @property
    def batch_std(self) -> np.ndarray | None:
        return None if self.batch_var is None else np.sqrt(self.batch_var + self.epsilon)


@dataclass
class WeightState:
    w_float: np.ndarray
    w_ema: np.ndarray


@dataclass(frozen=True)
class CalibrationStats:
    moving_min: float = 0.0
    moving_max: float = 0.0
    momentum: float = 0.99
    sample_count: int = 0

    @property
    def range(self) -> RangeSpec:
        return RangeSpec(min(self.moving_min, 0.0), max(self.moving_max, 0.0))


def update_activation_ranges(stats: CalibrationStats, tensor) -> CalibrationStats:
    t = np.asarray(tensor)
    if t.size == 0:
        raise ValueError("empty activation tensor")
    lo, hi = float(t.min()), float(t.max())
    if stats.sample_count == 0:
        return replace(stats, moving_min=lo, moving_max=hi, sample_count=1)
    m = stats.momentum
    return replace(stats, moving_min=m * stats.moving_min + (1 - m) * lo,
                   moving_max=m * stats.moving_max + (1 - m) * hi, sample_count=stats.sample_count + 1)


def update_bn_statistics(bn: BNState, batch_moments: tuple[np.ndarray, np.ndarray], step: int,
                         cfg: TrainConfig) -> BNState:
    mean_b, var_b = batch_moments
    if cfg.bn_frozen(step):
        return replace(bn, batch_mean=mean_b, batch_var=var_b, frozen=True)
    m = bn.momentum
    return replace(bn, moving_mean=m * bn.moving_mean + (1 - m) * mean_b,
                   moving_var=m * bn.moving_var + (1 - m) * var_b,
                   batch_mean=mean_b, batch_var=var_b, frozen=False)


def ema_update(ws: WeightState, decay: float) -> WeightState:
    if not 0 <= decay < 1:
        raise ValueError("decay must be in [0, 1)")
    return WeightState(ws.w_float, decay * ws.w_ema + (1 - decay) * ws.w_float)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class ConvBN:
    name: str
    w: np.ndarray
    bn: BNState
    stride: int = 1


@dataclass
class ReferenceCNN:
    layers: list[ConvBN]
    fc_w: np.ndarray
    fc_b: np.ndarray
    input_shape: tuple[int, int, int] = (28, 28, 1)
    pool: int = 2
    act_stats: dict[str, CalibrationStats] = field(default_factory=dict)
    ema: dict[str, np.ndarray] | None = None
    step: int = 0

    @classmethod
    def init(cls, rng: np.random.Generator, input_shape=(28, 28, 1), channels=(16, 32), strides=(1, 2),
             pool: int = 2, n_classes: int = 10, bn_momentum: float = 0.99, epsilon: float = 1e-3):
        h, w, c = input_shape
        layers = []
        for i, (cout, s) in enumerate(zip(channels, strides), 1):
            wt = rng.normal(0, math.sqrt(2.0 / (9 * c)), size=(3, 3, c, cout))
            bn = BNState(np.ones(cout), np.zeros(cout), np.zeros(cout), np.ones(cout), epsilon, bn_momentum)
            layers.append(ConvBN(f"conv{i}", wt, bn, s))
            h, w, c = -(-h // s), -(-w // s), cout
        h, w = h // pool, w // pool
        feat = h * w * c
        fc_w = rng.normal(0, math.sqrt(1.0 / feat), size=(feat, n_classes))
        return cls(layers, fc_w, np.zeros(n_classes), tuple(input_shape), pool)

    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors by graph constant name."""
        out = {}
        for i, l in enumerate(self.layers, 1):
            out[f"{l.name}/w"] = l.w
            out[f"bn{i}/gamma"] = l.bn.gamma
            out[f"bn{i}/beta"] = l.bn.beta
        out["fc/w"] = self.fc_w
        out["fc/b"] = self.fc_b
        return out

    def set_params(self, p: Mapping[str, np.ndarray]) -> None:
        for i, l in enumerate(self.layers, 1):
            l.w = p[f"{l.name}/w"]
            l.bn.gamma = p[f"bn{i}/gamma"]
            l.bn.beta = p[f"bn{i}/beta"]
        self.fc_w = p["fc/w"]
        self.fc_b = p["fc/b"]

    def boundary_names(self) -> list[str]:
        names = ["input/act_fq"] + [f"relu{i}/act_fq" for i in range(1, len(self.layers) + 1)]
        return names + ["pool/act_fq", "fc/act_fq"]

    def ranges(self) -> dict[str, list[float]]:
        return {k: list(s.range) for k, s in self.act_stats.items() if s.sample_count}

    def to_graph(self, use_ema: bool = False, batch: int = -1, dtype=np.float32) -> Graph:
        """Float graph (with explicit BatchNorm nodes) over the current weights."""
        p = dict(self.params())
        if use_ema and self.ema is not None:
            p.update(self.ema)
        consts: dict[str, np.ndarray] = {}
        nodes = [Node("input", Op.INPUT, (), {"shape": [batch, *self.input_shape]})]
        prev = "input"
        for i, l in enumerate(self.layers, 1):
            consts[f"{l.name}/w"] = p[f"{l.name}/w"]
            for k, v in (("gamma", p[f"bn{i}/gamma"]), ("beta", p[f"bn{i}/beta"]),
                         ("moving_mean", l.bn.moving_mean), ("moving_variance", l.bn.moving_var)):
                consts[f"bn{i}/{k}"] = v
            nodes.append(Node(l.name, Op.CONV2D, (prev, f"{l.name}/w"), {"stride": l.stride, "padding": "SAME"}))
            nodes.append(Node(f"bn{i}", Op.BATCHNORM,
                              (l.name, f"bn{i}/gamma", f"bn{i}/beta", f"bn{i}/moving_mean", f"bn{i}/moving_variance"),
                              {"epsilon": l.bn.epsilon, "momentum": l.bn.momentum}))
            nodes.append(Node(f"relu{i}", Op.RELU, (f"bn{i}",)))
            prev = f"relu{i}"
        nodes.append(Node("pool", Op.AVGPOOL, (prev,), {"k": self.pool, "stride": self.pool}))
        consts["fc/w"] = p["fc/w"]
        consts["fc/b"] = p["fc/b"]
        nodes.append(Node("fc", Op.FC, ("pool", "fc/w", "fc/b")))
        nodes.append(Node("logits", Op.OUTPUT, ("fc",)))
        consts = {k: np.asarray(v, dtype=dtype) for k, v in consts.items()}
        return Graph(tuple(nodes), consts, ("logits",))

    @classmethod
    def from_graph(cls, g: Graph) -> "ReferenceCNN":
        """Rebuild a model from a graph produced by :meth:`to_graph`."""
        c = {k: np.asarray(v, dtype=np.float64) for k, v in g.constants.items()}
        inp = g.node("input")
        layers = []
        i = 1
        while any(n.name == f"conv{i}" for n in g.nodes):
            conv, bn = g.node(f"conv{i}"), g.node(f"bn{i}")
            st = BNState(c[f"bn{i}/gamma"], c[f"bn{i}/beta"], c[f"bn{i}/moving_mean"], c[f"bn{i}/moving_variance"],
                         bn.attrs.get("epsilon", 1e-3), bn.attrs.get("momentum", 0.99))
            layers.append(ConvBN(f"conv{i}", c[f"conv{i}/w"], st, conv.attrs.get("stride", 1)))
            i += 1
        pool = g.node("pool").attrs["k"]
        return cls(layers, c["fc/w"], c["fc/b"], tuple(inp.attrs["shape"][1:]), pool)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _bn_axes(z):
    return tuple(range(z.ndim - 1))


class _Quantizer:
    """Fake quantization used inside the training step.

    ``surrogate`` swaps every quantizer for ``clamp`` to the same float range,
    which is the function whose exact derivative the straight-through
    estimator computes. ``weight_params`` pins the weight quantizer params so
    that finite differences do not move them.
    """

    def __init__(self, cfg: TrainConfig, surrogate: bool = False,
                 weight_params: dict | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.surrogate = surrogate
        self.weight_params = weight_params
        self.used_params: dict[str, list[QuantParams]] = {}
        self.rng = rng

    def _apply(self, x, params, axis=-1, stochastic=False):
        if self.surrogate:
            out, mask = fake_quant_tensor(x, params, axis)
            p = params
            scale = np.array([q.scale for q in p])
            zp = np.array([q.zero_point for q in p])
            lo, hi = p[0].code_range
            shape = [1] * np.ndim(x)
            if len(p) > 1:
                shape[axis] = len(p)
            lo_f = ((lo - zp) * scale).reshape(shape)
            hi_f = ((hi - zp) * scale).reshape(shape)
            return np.clip(x, lo_f, hi_f), mask
        if stochastic:
            scale = np.array([q.scale for q in params])
            shape = [1] * np.ndim(x)
            if len(params) > 1:
                shape[axis] = len(params)
            noisy = x + self.rng.uniform(-0.5, 0.5, size=x.shape) * scale.reshape(shape)
            out, _ = fake_quant_tensor(noisy, params, axis)
            _, mask = fake_quant_tensor(x, params, axis)
            return out, mask
        return fake_quant_tensor(x, params, axis)

    def weight(self, name: str, w: np.ndarray):
        cfg = self.cfg
        if self.weight_params is not None and name in self.weight_params:
            params = self.weight_params[name]
        else:
            params = tensor_params(w, Granularity.parse(cfg.weight_granularity), Scheme(cfg.weight_scheme),
                                   cfg.weight_bits, cfg.weight_narrow_range)
        self.used_params[name] = params
        return self._apply(w, params, -1, stochastic=cfg.stochastic_weights and self.rng is not None)

    def activation(self, rng: Sequence[float], x: np.ndarray):
        qp = params_from_range(RangeSpec(*rng), self.cfg.activation_bits, Scheme.AFFINE)
        return self._apply(x, [qp])


def _activation_range(model: ReferenceCNN, name: str, x: np.ndarray, cfg: TrainConfig, update: bool):
    stats = model.act_stats.get(name, CalibrationStats(momentum=cfg.range_momentum))
    if update or stats.sample_count == 0:
        stats = update_activation_ranges(stats, x)
        model.act_stats[name] = stats
    if stats.sample_count == 0:
        raise TrainingError(f"no range statistics for {name}")
    return stats.range


def forward_train(model: ReferenceCNN, batch, step: int, cfg: TrainConfig, *, surrogate: bool = False,
                  weight_params: dict | None = None, update_stats: bool = True,
                  rng: np.random.Generator | None = None):
    """Training-mode forward pass. Returns ``(loss, cache)``.

    Activation range statistics are updated (unless frozen with batch norm or
    ``update_stats`` is false) before the activation is quantized.
    """
    x, labels = batch
    x = np.asarray(x, dtype=np.float64)
    quant = cfg.quantizing(step)
    frozen = cfg.bn_frozen(step)
    upd = update_stats and not frozen
    q = _Quantizer(cfg, surrogate, weight_params, rng)
    cache: dict = {"quant": quant, "frozen": frozen, "layers": [], "masks": {}, "q": q}

    def act(name, t):
        r = _activation_range(model, name, t, cfg, upd)
        if not quant:
            return t
        out, mask = q.activation(r, t)
        cache["masks"][name] = mask
        return out

    h = act("input/act_fq", x)
    for l in model.layers:
        lc = {"h": h}
        bn = l.bn
        eps = bn.epsilon
        z = nn.conv2d(h, l.w, None, l.stride)
        axes = _bn_axes(z)
        mu_b, var_b = z.mean(axis=axes), z.var(axis=axes)
        sigma_b = np.sqrt(var_b + eps)
        lc.update(z=z, mu_b=mu_b, var_b=var_b, sigma_b=sigma_b)
        if not quant:
            xhat = (z - mu_b) / sigma_b
            y = bn.gamma * xhat + bn.beta
            lc.update(mode="float", xhat=xhat)
        else:
            sigma = bn.moving_std
            if cfg.bn_fold == "naive":
                w_f = l.w * (bn.gamma / sigma_b)
                wq, wmask = q.weight(l.name, w_f)
                u = nn.conv2d(h, wq, None, l.stride)
                y = u + (bn.beta - bn.gamma * mu_b / sigma_b)
                mode = "naive"
            else:
                w_f = l.w * (bn.gamma / sigma)
                wq, wmask = q.weight(l.name, w_f)
                u = nn.conv2d(h, wq, None, l.stride)
                bias = bn.beta - bn.gamma * mu_b / sigma_b
                if frozen:
                    y = u + bias + bn.gamma * (mu_b / sigma_b - bn.moving_mean / sigma)
                    mode = "frozen"
                else:
                    c = sigma_b / sigma
                    y = u / c + bias
                    lc["c"] = c
                    mode = "corrected"
            lc.update(mode=mode, w_f=w_f, wq=wq, wmask=wmask, u=u, sigma=sigma)
        lc["relu_mask"] = y > 0
        h = act(f"relu{len(cache['layers']) + 1}/act_fq", np.maximum(y, 0.0))
        cache["layers"].append(lc)
    cache["pool_in_shape"] = h.shape
    p = act("pool/act_fq", nn.avgpool(h, model.pool))
    cache["p"] = p
    if quant:
        fcw, fmask = q.weight("fc", model.fc_w)
        cache["fc_wmask"] = fmask
    else:
        fcw = model.fc_w
    cache["fcw"] = fcw
    logits = act("fc/act_fq", nn.dense(p, fcw, model.fc_b))
    loss, glogits = nn.softmax_xent(logits, np.asarray(labels))
    cache["logits"] = logits
    cache["glogits"] = glogits
    return loss, cache


def compute_gradients(model: ReferenceCNN, cache) -> dict[str, np.ndarray]:
    """Backward pass for :func:`forward_train` with straight-through quantizers."""
    grads: dict[str, np.ndarray] = {}
    masks = cache["masks"]

    def ste(name, g):
        m = masks.get(name)
        return g if m is None else g * m

    g = ste("fc/act_fq", cache["glogits"])
    p = cache["p"]
    p2 = p.reshape(p.shape[0], -1)
    grads["fc/b"] = g.sum(axis=0)
    gfcw = p2.T @ g
    if cache["quant"]:
        gfcw = gfcw * cache["fc_wmask"]
    grads["fc/w"] = gfcw
    gp = (g @ cache["fcw"].T).reshape(p.shape)
    gp = ste("pool/act_fq", gp)
    gh = nn.avgpool_backward(cache["pool_in_shape"], gp, model.pool)
    for i in range(len(model.layers), 0, -1):
        l = model.layers[i - 1]
        lc = cache["layers"][i - 1]
        bn = l.bn
        gy = ste(f"relu{i}/act_fq", gh) * lc["relu_mask"]
        axes = _bn_axes(gy)
        sgy = gy.sum(axis=axes)
        h, z = lc["h"], lc["z"]
        mu_b, sigma_b = lc["mu_b"], lc["sigma_b"]
        gz = None
        gw = np.zeros_like(l.w)
        if lc["mode"] == "float":
            xhat = lc["xhat"]
            grads[f"bn{i}/gamma"] = (gy * xhat).sum(axis=axes)
            grads[f"bn{i}/beta"] = sgy
            gxhat = gy * bn.gamma
            gz = (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes)) / sigma_b
        else:
            mode, u, sigma = lc["mode"], lc["u"], lc["sigma"]
            grads[f"bn{i}/beta"] = sgy
            if mode == "frozen":
                gu = gy
                ggamma = -bn.moving_mean / sigma * sgy
                gmu_b = gsig_b = None
            elif mode == "corrected":
                c = lc["c"]
                gu = gy / c
                gc = -(gy * u).sum(axis=axes) / c ** 2
                gsig_b = gc / sigma + sgy * bn.gamma * mu_b / sigma_b ** 2
                gmu_b = -bn.gamma / sigma_b * sgy
                ggamma = -mu_b / sigma_b * sgy
            else:  # naive
                gu = gy
                gsig_b = sgy * bn.gamma * mu_b / sigma_b ** 2
                gmu_b = -bn.gamma / sigma_b * sgy
                ggamma = -mu_b / sigma_b * sgy
            gh1, gwq, _ = nn.conv2d_backward(h, lc["wq"], gu, l.stride)
            gwf = gwq * lc["wmask"]
            fold_axes = (0, 1, 2)
            if mode == "naive":
                gw = gw + gwf * (bn.gamma / sigma_b)
                ggamma = ggamma + (gwf * l.w).sum(axis=fold_axes) / sigma_b
                gsig_b = gsig_b - (gwf * l.w).sum(axis=fold_axes) * bn.gamma / sigma_b ** 2
            else:
                gw = gw + gwf * (bn.gamma / sigma)
                ggamma = ggamma + (gwf * l.w).sum(axis=fold_axes) / sigma
            grads[f"bn{i}/gamma"] = ggamma
            if gmu_b is not None:
                m = z.size // z.shape[-1]
                gvar_b = gsig_b / (2 * sigma_b)
                gz = gmu_b / m + gvar_b * 2 * (z - mu_b) / m
            gh = gh1
        if gz is not None:
            gh2, gw2, _ = nn.conv2d_backward(h, l.w, gz, l.stride)
            gw = gw + gw2
            gh = gh2 if lc["mode"] == "float" else gh + gh2
        grads[f"{l.name}/w"] = gw
        gh = ste("input/act_fq", gh) if i == 1 else gh
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradient(k)
    return grads


def sgd_step(w: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return w - lr * grad


def backward_update(model: ReferenceCNN, cache, cfg: TrainConfig, step: int) -> ReferenceCNN:
    """Gradient step on the float master weights, then batch-norm and EMA bookkeeping."""
    grads = compute_gradients(model, cache)
    params = model.params()
    if cfg.weight_decay:
        for k, v in params.items():
            if k.endswith("/w"):
                grads[k] = grads[k] + cfg.weight_decay * v
    model.set_params({k: sgd_step(v, grads[k], cfg.learning_rate) for k, v in params.items()})
    for l, lc in zip(model.layers, cache["layers"]):
        l.bn = update_bn_statistics(l.bn, (lc["mu_b"], lc["var_b"]), step, cfg)
    if cfg.ema_decay is not None:
        p = model.params()
        if model.ema is None:
            model.ema = {k: v.copy() for k, v in p.items()}
        else:
            model.ema = {k: ema_update(WeightState(p[k], model.ema[k]), cfg.ema_decay).w_ema for k in p}
    model.step = step + 1
    return model


# ---------------------------------------------------------------------------
# evaluation and training loop
# ---------------------------------------------------------------------------

def eval_graph(model: ReferenceCNN, cfg: TrainConfig | None, use_ema: bool = False,
               quantized: bool = True, dtype=np.float32) -> Graph:
    """Inference graph: BN folded with long-term statistics, fake quant inserted."""
    g = fold_bn_eval(model.to_graph(use_ema=use_ema, dtype=dtype))
    if quantized and cfg is not None:
        g = set_activation_ranges(insert_fake_quant(g, cfg.quant_config), model.ranges())
    return g


def predict(g: Graph, images, batch_size: int = 500) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(run(g, {"input": images[i:i + batch_size]}, dtype=np.float64)[g.outputs[0]])
    return np.concatenate(out)


def accuracy(g: Graph, images, labels) -> float:
    return float(np.mean(predict(g, images).argmax(axis=1) == np.asarray(labels)))


def folded_weight_codes(model: ReferenceCNN, cache) -> np.ndarray:
    """All weight codes the forward pass actually used, flattened."""
    q: _Quantizer = cache["q"]
    codes = []
    for l, lc in zip(model.layers, cache["layers"]):
        if "w_f" in lc:
            params = q.used_params[l.name]
            scale = np.array([p.scale for p in params])
            codes.append(np.rint(lc["wq"] / scale).ravel())
    if "fc" in q.used_params:
        scale = np.array([p.scale for p in q.used_params["fc"]])
        codes.append(np.rint(cache["fcw"] / scale).ravel())
    return np.concatenate(codes) if codes else np.zeros(0)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    if n < batch_size or batch_size <= 0:
        raise DataExhausted(f"dataset of {n} samples cannot fill a batch of {batch_size}")
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def train(model: ReferenceCNN, dataset, cfg: TrainConfig, eval_data=None, eval_every: int | None = None):
    """Run ``cfg.total_steps`` SGD steps on a copy of ``model``.

    Returns ``(model, metrics)`` where metrics is a list of dict rows with the
    columns ``step, loss, eval_acc_inst, eval_acc_ema, bn_frozen, weight_code_churn``.
    """
    model = copy.deepcopy(model)
    if cfg.total_steps == 0:
        return model, []
    images, labels = dataset
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.rng_seed)
    noise_rng = np.random.default_rng(cfg.rng_seed + 1) if cfg.stochastic_weights else None
    eval_every = cfg.eval_every if eval_every is None else eval_every
    for l in model.layers:
        l.bn.momentum = cfg.bn_momentum
    metrics = []
    prev_codes = None
    order = batches(len(images), cfg.batch_size, rng)
    start = model.step
    for step in range(start, start + cfg.total_steps):
        idx = next(order)
        loss, cache = forward_train(model, (images[idx], labels[idx]), step, cfg, rng=noise_rng)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss} at step {step}")
        backward_update(model, cache, cfg, step)
        churn = float("nan")
        if cache["quant"]:
            codes = folded_weight_codes(model, cache)
            if prev_codes is not None and prev_codes.shape == codes.shape:
                churn = float(np.mean(codes != prev_codes))
            prev_codes = codes
        row = {"step": step, "loss": loss, "eval_acc_inst": float("nan"), "eval_acc_ema": float("nan"),
               "bn_frozen": cfg.bn_frozen(step), "weight_code_churn": churn}
        last = step == start + cfg.total_steps - 1
        if eval_data is not None and eval_every and ((step - start + 1) % eval_every == 0 or last):
            quantized = cfg.quantizing(step)
            row["eval_acc_inst"] = accuracy(eval_graph(model, cfg, quantized=quantized), *eval_data)
            if model.ema is not None:
                row["eval_acc_ema"] = accuracy(eval_graph(model, cfg, use_ema=True, quantized=quantized),
                                               *eval_data)
        metrics.append(row)
        if (step - start) % 100 == 0:
            log.debug("step %d loss %.4f", step, loss)
    return model, metrics


METRIC_COLUMNS = ("step", "loss", "eval_acc_inst", "eval_acc_ema", "bn_frozen", "weight_code_churn")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_artifact(model: ReferenceCNN, cfg: TrainConfig | None = None):
    """Float graph with unfolded batch norm plus EMA copies and training state."""
    from . import formats

    g = model.to_graph()
    tensors = {k: formats.TensorEntry(np.asarray(v, dtype=np.float32)) for k, v in g.constants.items()}
    if model.ema is not None:
        for k, v in model.ema.items():
            tensors[f"ema/{k}"] = formats.TensorEntry(np.asarray(v, dtype=np.float32))
    meta = {
        "step": model.step,
        "act_stats": {k: [s.moving_min, s.moving_max, s.momentum, s.sample_count]
                      for k, s in model.act_stats.items()},
        "train_config": None if cfg is None else config_dict(cfg),
    }
    return formats.Artifact("checkpoint", tensors, g.to_json(), meta)


def model_from_artifact(art) -> ReferenceCNN:
    from .ptq import graph_from_artifact

    if art.kind not in ("checkpoint", "float"):
        raise TypeError(f"cannot build a trainable model from a {art.kind!r} artifact")
    consts = {k: e.array for k, e in art.tensors.items() if not k.startswith("ema/")}
    g = graph_from_artifact(type(art)(art.kind, {k: art.tensors[k] for k in consts}, art.graph, art.meta))
    model = ReferenceCNN.from_graph(g)
    ema = {k[4:]: np.asarray(e.array, dtype=np.float64) for k, e in art.tensors.items() if k.startswith("ema/")}
    model.ema = ema or None
    model.step = int(art.meta.get("step", 0))
    model.act_stats = {k: CalibrationStats(float(a), float(b), float(m), int(c))
                       for k, (a, b, m, c) in art.meta.get("act_stats", {}).items()}
    return model
