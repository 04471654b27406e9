"""A small NHWC computation graph with the rewrites used for quantization.

Every node produces one tensor named after the node. Weight tensors live in
``Graph.constants`` and are referenced from node inputs by name. Rewrites never
mutate their argument; they return a new :class:`Graph`.

Internal ops produced by :func:`fold_bn_training`:

* ``FoldWeights`` -- computes ``gamma * W / sigma`` from the long-term variance.
* ``BNCorrection`` -- applies the batch/long-term statistics correction to the
  output of a convolution over the folded weights.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .quant_core import (PER_CHANNEL, PER_LAYER, Granularity, QuantParams, RangeSpec, Scheme,
                         fake_quant_tensor, params_from_range, tensor_params)


class GraphError(ValueError):
    pass


class ShapeMismatch(GraphError):
    def __init__(self, node: str, msg: str):
        super().__init__(f"{node}: {msg}")
        self.node = node


class AlreadyQuantized(GraphError):
    pass


class UnsupportedTopology(GraphError):
    pass


class MissingRange(GraphError):
    def __init__(self, tensor: str):
        super().__init__(f"no activation range for tensor {tensor!r}")
        self.tensor = tensor


class Op(str, enum.Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    CONV2D = "Conv2D"
    DEPTHWISE = "DepthwiseConv2D"
    FC = "FullyConnected"
    ADD = "Add"
    CONCAT = "Concat"
    RELU = "ReLU"
    RELU6 = "ReLU6"
    BATCHNORM = "BatchNorm"
    AVGPOOL = "AvgPool"
    FAKEQUANT = "FakeQuant"
    FOLD_WEIGHTS = "FoldWeights"
    BN_CORRECTION = "BNCorrection"


LINEAR_OPS = (Op.CONV2D, Op.DEPTHWISE, Op.FC)
ACTIVATIONS = (Op.RELU, Op.RELU6)
BN_OPS = (Op.BATCHNORM, Op.BN_CORRECTION)


@dataclass(frozen=True)
class Node:
    name: str
    op: Op
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "op", Op(self.op))
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def with_(self, **kw) -> "Node":
        return replace(self, **kw)

    def to_json(self) -> dict:
        return {"name": self.name, "op": self.op.value, "inputs": list(self.inputs), "attrs": self.attrs}

    @classmethod
    def from_json(cls, d: dict) -> "Node":
        return cls(d["name"], Op(d["op"]), tuple(d["inputs"]), dict(d.get("attrs", {})))


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    constants: Mapping[str, np.ndarray]
    outputs: tuple[str, ...]
    shapes: Mapping[str, tuple] | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "constants", dict(self.constants))

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op is Op.INPUT]

    def consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {}
        for n in self.nodes:
            for i in n.inputs:
                out.setdefault(i, []).append(n)
        return out

    def producers(self) -> dict[str, Node]:
        return {n.name: n for n in self.nodes}

    def has_fake_quant(self) -> bool:
        return any(n.op is Op.FAKEQUANT for n in self.nodes)

    def prune(self) -> "Graph":
        """Drop constants nobody references."""
        used = {i for n in self.nodes for i in n.inputs}
        return replace(self, constants={k: v for k, v in self.constants.items() if k in used})

    def to_json(self) -> dict:
        return {"nodes": [n.to_json() for n in self.nodes], "outputs": list(self.outputs)}

    @classmethod
    def from_json(cls, d: dict, constants: Mapping[str, np.ndarray]) -> "Graph":
        return cls(tuple(Node.from_json(n) for n in d["nodes"]), constants, tuple(d["outputs"]))

    def validate(self) -> None:
        seen = set(self.constants)
        names = set()
        for n in self.nodes:
            if n.name in names or n.name in self.constants:
                raise GraphError(f"duplicate tensor name {n.name!r}")
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"{n.name}: input {i!r} is not produced before use")
            names.add(n.name)
            seen.add(n.name)
        for o in self.outputs:
            if o not in names:
                raise GraphError(f"unknown output {o!r}")


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------

def _linear_out_shape(n: Node, xs, ws) -> tuple:
    if n.op is Op.FC:
        feat = int(np.prod(xs[1:]))
        if len(ws) != 2 or ws[0] != feat:
            raise ShapeMismatch(n.name, f"fc input features {feat} vs weights {ws}")
        return (xs[0], ws[1])
    if len(xs) != 4 or len(ws) != 4:
        raise ShapeMismatch(n.name, f"expected NHWC input and 4-d weights, got {xs} and {ws}")
    kh, kw, c, cout = ws
    if xs[3] != c:
        raise ShapeMismatch(n.name, f"input channels {xs[3]} vs weight channels {c}")
    if n.op is Op.DEPTHWISE:
        cout = c * ws[3]
    stride = n.attrs.get("stride", 1)
    padding = n.attrs.get("padding", "SAME")
    ho = nn.conv_out_size(xs[1], kh, stride, padding)
    wo = nn.conv_out_size(xs[2], kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(n.name, "kernel larger than input")
    return (xs[0], ho, wo, cout)


def infer_shapes(g: Graph) -> Graph:
    g.validate()
    shapes: dict[str, tuple] = {k: tuple(v.shape) for k, v in g.constants.items()}
    for n in g.nodes:
        ins = [shapes[i] for i in n.inputs]
        op = n.op
        if op is Op.INPUT:
            s = tuple(n.attrs["shape"])
        elif op in LINEAR_OPS:
            s = _linear_out_shape(n, ins[0], ins[1])
            if len(ins) > 2 and ins[2] != (s[-1],):
                raise ShapeMismatch(n.name, f"bias shape {ins[2]} vs {s[-1]} channels")
        elif op is Op.ADD:
            if ins[0] != ins[1]:
                raise ShapeMismatch(n.name, f"add of {ins[0]} and {ins[1]}")
            s = ins[0]
        elif op is Op.CONCAT:
            axis = n.attrs.get("axis", -1)
            if not ins:
                raise ShapeMismatch(n.name, "concat of nothing")
            ax = axis % len(ins[0])
            for o in ins[1:]:
                if len(o) != len(ins[0]) or any(a != b for d, (a, b) in enumerate(zip(o, ins[0])) if d != ax):
                    raise ShapeMismatch(n.name, f"concat of {ins[0]} and {o} on axis {axis}")
            s = tuple(sum(o[ax] for o in ins) if d == ax else ins[0][d] for d in range(len(ins[0])))
        elif op in ACTIVATIONS or op in (Op.OUTPUT, Op.FAKEQUANT):
            s = ins[0]
        elif op is Op.BATCHNORM:
            c = ins[0][-1]
            if any(v != (c,) for v in ins[1:5]):
                raise ShapeMismatch(n.name, f"batchnorm vectors do not match {c} channels")
            s = ins[0]
        elif op is Op.BN_CORRECTION:
            if ins[0] != ins[1]:
                raise ShapeMismatch(n.name, f"folded {ins[0]} vs moments {ins[1]}")
            s = ins[0]
        elif op is Op.FOLD_WEIGHTS:
            s = ins[0]
        elif op is Op.AVGPOOL:
            k = n.attrs["k"]
            stride = n.attrs.get("stride", k)
            s = (ins[0][0], nn.conv_out_size(ins[0][1], k, stride, "VALID"),
                 nn.conv_out_size(ins[0][2], k, stride, "VALID"), ins[0][3])
        else:  # pragma: no cover
            raise GraphError(f"unknown op {op}")
        shapes[n.name] = s
    return replace(g, shapes=shapes)


# ---------------------------------------------------------------------------
# float execution
# ---------------------------------------------------------------------------

def bn_sigma(var, eps):
    return np.sqrt(np.asarray(var, dtype=np.float64) + eps)


def _scale_out_channels(w: np.ndarray, s: np.ndarray, kind: Op) -> np.ndarray:
    if kind is Op.DEPTHWISE:
        return w * s.reshape(w.shape[2], w.shape[3])
    return w * s


def weight_channel_view(w: np.ndarray, kind: Op | str | None) -> np.ndarray:
    """View a weight tensor as ``[..., out_channels]``."""
    if kind is not None and Op(kind) is Op.DEPTHWISE:
        return w.reshape(w.shape[0], w.shape[1], -1)
    return w


def fake_quant_weight(w: np.ndarray, attrs: dict):
    """Fake-quantize a weight tensor from its own min/max. Returns (values, mask, params)."""
    view = weight_channel_view(w, attrs.get("kind"))
    gran = Granularity.parse(attrs.get("granularity", "per_layer"))
    params = tensor_params(view, gran, Scheme(attrs.get("scheme", "affine")), attrs.get("n_bits", 8),
                           attrs.get("narrow_range", False))
    out, mask = fake_quant_tensor(view, params, -1)
    return out.reshape(w.shape), mask.reshape(w.shape), params


def activation_params(rng: RangeSpec | Sequence[float], n_bits: int = 8) -> QuantParams:
    return params_from_range(RangeSpec(*rng), n_bits, Scheme.AFFINE)


class RangeObserver:
    """Collects per-batch (min, max) of each activation boundary during execution."""

    def __init__(self):
        self.batches: dict[str, list[tuple[float, float]]] = {}

    def __call__(self, name: str, t: np.ndarray):
        self.batches.setdefault(name, []).append((float(t.min()), float(t.max())))


def _batch_moments(z):
    axes = tuple(range(z.ndim - 1))
    mu = z.mean(axis=axes)
    var = z.var(axis=axes)
    return mu, var


def run(g: Graph, feeds: Mapping[str, np.ndarray], *, ranges: Mapping[str, Sequence[float]] | None = None,
        observer: Callable[[str, np.ndarray], None] | None = None, dtype=np.float32,
        keep_all: bool = False, bn_training: bool = False) -> dict[str, np.ndarray]:
    """Execute ``g`` in float64 and return the graph outputs cast to ``dtype``.

    Activation FakeQuant nodes take their range from the node's ``range`` attr or
    from ``ranges[node_name]``. With ``observer`` set, activation FakeQuant nodes
    report their input and pass it through unchanged (calibration mode).
    ``bn_training`` makes BatchNorm nodes normalize with batch statistics.
    """
    vals: dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in g.constants.items()}
    for n in g.nodes:
        a = n.attrs
        x = [vals[i] for i in n.inputs]
        op = n.op
        if op is Op.INPUT:
            y = np.asarray(feeds[n.name], dtype=np.float64)
        elif op is Op.OUTPUT:
            y = x[0]
        elif op is Op.CONV2D:
            y = nn.conv2d(x[0], x[1], x[2] if len(x) > 2 else None, a.get("stride", 1), a.get("padding", "SAME"))
        elif op is Op.DEPTHWISE:
            y = nn.depthwise_conv2d(x[0], x[1], x[2] if len(x) > 2 else None, a.get("stride", 1),
                                    a.get("padding", "SAME"))
        elif op is Op.FC:
            y = nn.dense(x[0], x[1], x[2] if len(x) > 2 else None)
        elif op is Op.ADD:
            y = x[0] + x[1]
        elif op is Op.CONCAT:
            y = np.concatenate(x, axis=a.get("axis", -1))
        elif op is Op.RELU:
            y = np.maximum(x[0], 0.0)
        elif op is Op.RELU6:
            y = np.clip(x[0], 0.0, 6.0)
        elif op is Op.AVGPOOL:
            y = nn.avgpool(x[0], a["k"], a.get("stride"))
        elif op is Op.BATCHNORM:
            xin, gamma, beta, mean, var = x
            if bn_training:
                mean, var = _batch_moments(xin)
            y = gamma * (xin - mean) / bn_sigma(var, a.get("epsilon", 1e-3)) + beta
        elif op is Op.FOLD_WEIGHTS:
            w, gamma, var = x
            y = _scale_out_channels(w, gamma / bn_sigma(var, a.get("epsilon", 1e-3)), Op(a["kind"]))
        elif op is Op.BN_CORRECTION:
            y = _bn_correction(x, a)
        elif op is Op.FAKEQUANT:
            if a.get("role") == "weight":
                y = fake_quant_weight(x[0], a)[0]
            elif observer is not None:
                observer(n.name, x[0])
                y = x[0]
            else:
                rng = a.get("range")
                if rng is None and ranges is not None:
                    rng = ranges.get(n.name)
                if rng is None:
                    raise MissingRange(a.get("tensor", n.name))
                qp = activation_params(rng, a.get("n_bits", 8))
                y = fake_quant_tensor(x[0], [qp])[0]
        else:  # pragma: no cover
            raise GraphError(f"cannot execute {op}")
        vals[n.name] = y
    if keep_all:
        return {k: v.astype(dtype) for k, v in vals.items() if k not in g.constants}
    return {o: vals[o].astype(dtype) for o in g.outputs}


def _bn_correction(x, a):
    """Output of the corrected folded batch-norm block (training graph)."""
    y, z, gamma, beta, mean, var = x[:6]
    bias_in = x[6] if len(x) > 6 else 0.0
    eps = a.get("epsilon", 1e-3)
    mu_b, var_b = _batch_moments(z)
    sigma_b = bn_sigma(var_b, eps)
    sigma = bn_sigma(var, eps)
    # conv bias is part of z but not of the folded product
    bias = beta - gamma * (mu_b - bias_in) / sigma_b
    if a.get("freeze", False):
        correction = gamma * (mu_b / sigma_b - mean / sigma) + gamma * bias_in * (1 / sigma - 1 / sigma_b)
        return y + bias + correction
    c = sigma_b / sigma
    return y / c + bias


# ---------------------------------------------------------------------------
# rewrites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantConfig:
    weight_scheme: Scheme = Scheme.SYMMETRIC_SIGNED
    weight_granularity: Granularity = PER_CHANNEL
    weight_bits: int = 8
    weight_narrow_range: bool = False
    activation_bits: int = 8

    def weight_attrs(self) -> dict:
        return {"role": "weight", "scheme": Scheme(self.weight_scheme).value,
                "granularity": str(self.weight_granularity), "n_bits": self.weight_bits,
                "narrow_range": self.weight_narrow_range}


def _is_moments_conv(n: Node) -> bool:
    return n.attrs.get("role") == "bn_moments"


def activation_boundaries(g: Graph) -> list[str]:
    """Tensors that get materialized in integer inference, in graph order.

    Fused chains (linear op -> batch norm -> activation, add -> activation) are
    only quantized at their end.
    """
    cons = g.consumers()
    out = []
    for n in g.nodes:
        if n.op in (Op.OUTPUT, Op.FAKEQUANT, Op.FOLD_WEIGHTS) or _is_moments_conv(n):
            continue
        following = [c for c in cons.get(n.name, []) if not _is_moments_conv(c)]
        if n.op is Op.INPUT or n.op in ACTIVATIONS:
            out.append(n.name)
            continue
        fused_next = len(following) == 1 and (
            following[0].op in ACTIVATIONS
            or (n.op in LINEAR_OPS and following[0].op in BN_OPS and following[0].inputs[0] == n.name))
        if not fused_next:
            out.append(n.name)
    return out


def insert_fake_quant(g: Graph, cfg: QuantConfig = QuantConfig()) -> Graph:
    if g.has_fake_quant():
        raise AlreadyQuantized("graph already contains FakeQuant nodes")
    boundaries = set(activation_boundaries(g))
    rename: dict[str, str] = {}
    new_nodes: list[Node] = []
    weight_fq: dict[str, str] = {}

    def fq_weight(tensor: str, kind: Op) -> str:
        if tensor not in weight_fq:
            name = f"{tensor}/fq"
            weight_fq[tensor] = name
            new_nodes.append(Node(name, Op.FAKEQUANT, (tensor,),
                                  {**cfg.weight_attrs(), "tensor": tensor, "kind": kind.value}))
        return weight_fq[tensor]

    for n in g.nodes:
        inputs = [rename.get(i, i) for i in n.inputs]
        if n.op in LINEAR_OPS and not _is_moments_conv(n):
            inputs[1] = fq_weight(n.inputs[1], n.op)
        new_nodes.append(n.with_(inputs=tuple(inputs)))
        if n.name in boundaries:
            name = f"{n.name}/act_fq"
            new_nodes.append(Node(name, Op.FAKEQUANT, (n.name,),
                                  {"role": "activation", "tensor": n.name, "n_bits": cfg.activation_bits,
                                   "range": None}))
            rename[n.name] = name
    outputs = tuple(rename.get(o, o) for o in g.outputs)
    return infer_shapes(Graph(tuple(new_nodes), g.constants, outputs))


def _foldable_pairs(g: Graph) -> dict[str, Node]:
    """Map BatchNorm name -> producing linear node, checking the topology."""
    prod = g.producers()
    cons = g.consumers()
    pairs = {}
    for n in g.nodes:
        if n.op is not Op.BATCHNORM:
            continue
        p = prod.get(n.inputs[0])
        if p is None or p.op not in LINEAR_OPS:
            raise UnsupportedTopology(f"{n.name}: batch norm does not follow a conv/fc layer")
        if len(cons[p.name]) != 1:
            raise UnsupportedTopology(f"{p.name}: output feeds more than the batch norm")
        pairs[n.name] = p
    return pairs


def fold_bn_eval(g: Graph) -> Graph:
    """Fold every BatchNorm into its producer using the long-term statistics."""
    pairs = _foldable_pairs(g)
    by_linear = {p.name: bn for bn, p in pairs.items()}
    bns = {n.name: n for n in g.nodes if n.op is Op.BATCHNORM}
    consts = dict(g.constants)
    rename: dict[str, str] = {}
    nodes = []
    for n in g.nodes:
        if n.op is Op.BATCHNORM:
            continue
        inputs = tuple(rename.get(i, i) for i in n.inputs)
        if n.name in by_linear:
            bn = bns[by_linear[n.name]]
            gamma, beta, mean, var = (np.asarray(consts[i], dtype=np.float64) for i in bn.inputs[1:5])
            s = gamma / bn_sigma(var, bn.attrs.get("epsilon", 1e-3))
            w = np.asarray(consts[n.inputs[1]], dtype=np.float64)
            b = np.asarray(consts[n.inputs[2]], dtype=np.float64) if len(n.inputs) > 2 else 0.0
            wname, bname = f"{n.name}/w_fold", f"{n.name}/b_fold"
            out_t = np.asarray(consts[n.inputs[1]]).dtype
            consts[wname] = _scale_out_channels(w, s, n.op).astype(out_t)
            consts[bname] = (beta + (b - mean) * s).astype(out_t)
            # the folded node takes over the batch norm's tensor name
            nodes.append(n.with_(name=bn.name, inputs=(inputs[0], wname, bname)))
            rename[n.name] = bn.name
            continue
        nodes.append(n.with_(inputs=inputs))
    outputs = tuple(rename.get(o, o) for o in g.outputs)
    return infer_shapes(Graph(tuple(nodes), consts, outputs).prune())


def fold_bn_training(g: Graph, freeze: bool = False) -> Graph:
    """Rewrite linear+BatchNorm pairs into the corrected folding subgraph.

    The folded weights always use the long-term variance, so they do not jitter
    with batch statistics. Before freezing the block divides by
    ``c = sigma_B / sigma`` and reproduces batch norm; after freezing it adds the
    bias correction and matches the inference-time folding.
    """
    if g.has_fake_quant():
        raise AlreadyQuantized("fold batch norms before inserting FakeQuant nodes")
    pairs = _foldable_pairs(g)
    by_linear = {p.name: bn for bn, p in pairs.items()}
    bns = {n.name: n for n in g.nodes if n.op is Op.BATCHNORM}
    nodes = []
    for n in g.nodes:
        if n.op is Op.BATCHNORM:
            continue
        if n.name not in by_linear:
            nodes.append(n)
            continue
        bn = bns[by_linear[n.name]]
        eps = bn.attrs.get("epsilon", 1e-3)
        w, gamma, beta, mean, var = n.inputs[1], *bn.inputs[1:5]
        fold = f"{bn.name}/fold_w"
        nodes.append(Node(fold, Op.FOLD_WEIGHTS, (w, gamma, var), {"epsilon": eps, "kind": n.op.value}))
        nodes.append(Node(f"{n.name}/moments", n.op, n.inputs, {**n.attrs, "role": "bn_moments"}))
        conv_attrs = {k: v for k, v in n.attrs.items() if k != "role"}
        nodes.append(Node(n.name, n.op, (n.inputs[0], fold), conv_attrs))
        corr_in = (n.name, f"{n.name}/moments", gamma, beta, mean, var) + tuple(n.inputs[2:3])
        nodes.append(Node(bn.name, Op.BN_CORRECTION, corr_in,
                          {"epsilon": eps, "momentum": bn.attrs.get("momentum", 0.99), "freeze": bool(freeze)}))
    return infer_shapes(Graph(tuple(nodes), g.constants, g.outputs))


def set_activation_ranges(g: Graph, ranges: Mapping[str, Sequence[float]]) -> Graph:
    """Copy calibrated ranges into the activation FakeQuant nodes."""
    nodes = []
    for n in g.nodes:
        if n.op is Op.FAKEQUANT and n.attrs.get("role") == "activation" and n.name in ranges:
            n = n.with_(attrs={**n.attrs, "range": [float(v) for v in ranges[n.name]]})
        nodes.append(n)
    return replace(g, nodes=tuple(nodes))
