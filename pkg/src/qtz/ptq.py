"""Post-training quantization: weight-only, calibration and integer conversion.

All entry points take a float graph whose batch norms are already folded
(:func:`qtz.graph_ir.fold_bn_eval`).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import formats
from . import int_kernels as ik
from .graph_ir import (ACTIVATIONS, LINEAR_OPS, Graph, MissingRange, Op, QuantConfig, RangeObserver,
                       UnsupportedTopology, activation_boundaries, activation_params, insert_fake_quant, run,
                       weight_channel_view)
from .quant_core import (Granularity, QuantParams, RangeSpec, Scheme, dequantize_with, params_list_from_dict,
                         params_list_to_dict, quantize_with, relax_range, tensor_params)


class NoData(ValueError):
    pass


@dataclass(frozen=True)
class PTQConfig:
    weight_scheme: str = "symmetric_signed"
    weight_granularity: str = "per_channel"
    weight_bits: int = 8
    weight_narrow_range: bool = False
    activation_bits: int = 8
    calibration_batches: int = 100
    range_momentum: float = 0.99
    global_minmax: bool = False

    def __post_init__(self):
        if self.weight_bits not in (4, 8):
            raise ValueError(f"weight_bits must be 4 or 8, got {self.weight_bits}")
        if self.activation_bits not in (4, 8):
            raise ValueError(f"activation_bits must be 4 or 8, got {self.activation_bits}")
        if self.calibration_batches < 1:
            raise ValueError("calibration_batches must be >= 1")
        Scheme(self.weight_scheme)
        Granularity.parse(self.weight_granularity)

    @property
    def quant_config(self) -> QuantConfig:
        return QuantConfig(Scheme(self.weight_scheme), Granularity.parse(self.weight_granularity),
                           self.weight_bits, self.weight_narrow_range, self.activation_bits)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PTQConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def _require_folded(g: Graph) -> None:
    for n in g.nodes:
        if n.op in (Op.BATCHNORM, Op.FOLD_WEIGHTS, Op.BN_CORRECTION):
            raise UnsupportedTopology(f"{n.name}: fold batch norm before post-training quantization")


def weight_tensors(g: Graph) -> dict[str, Op]:
    """Constant name -> consuming op kind, for every weight of a linear op."""
    return {n.inputs[1]: n.op for n in g.nodes if n.op in LINEAR_OPS and n.attrs.get("role") != "bn_moments"}


def quantize_weight(w: np.ndarray, kind: Op, cfg: PTQConfig):
    """Codes (same shape as ``w``) and their params for one weight tensor."""
    view = weight_channel_view(np.asarray(w, dtype=np.float64), kind)
    params = tensor_params(view, Granularity.parse(cfg.weight_granularity), Scheme(cfg.weight_scheme),
                           cfg.weight_bits, cfg.weight_narrow_range)
    return quantize_with(view, params, -1).reshape(w.shape), params


def quantize_weights_only(g: Graph, cfg: PTQConfig = PTQConfig()):
    """Replace every weight by its simulated-quantized value.

    Returns ``(graph, params)`` with ``params[name]`` the QuantParams list of
    each weight constant. The graph still executes in float.
    """
    _require_folded(g)
    consts = dict(g.constants)
    params = {}
    for name, kind in weight_tensors(g).items():
        w = consts[name]
        codes, p = quantize_weight(w, kind, cfg)
        deq = dequantize_with(weight_channel_view(codes, kind), p, -1).reshape(w.shape)
        consts[name] = deq.astype(np.asarray(w).dtype)
        params[name] = p
    return Graph(g.nodes, consts, g.outputs, g.shapes), params


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _ema_range(pairs: Sequence[tuple[float, float]], momentum: float) -> RangeSpec:
    lo, hi = pairs[0]
    for a, b in pairs[1:]:
        lo = momentum * lo + (1 - momentum) * a
        hi = momentum * hi + (1 - momentum) * b
    return RangeSpec(lo, hi)


def calibrate(g: Graph, data_iter: Iterable, cfg: PTQConfig = PTQConfig()) -> dict[str, list[float]]:
    """Activation ranges for every quantization boundary of ``g``.

    ``data_iter`` yields input batches (arrays, or ``(images, labels)`` pairs).
    Ranges are keyed by the FakeQuant node names that :func:`insert_fake_quant`
    creates (``"<tensor>/act_fq"``) and are zero-relaxed after the EMA.
    """
    _require_folded(g)
    fq = insert_fake_quant(g, cfg.quant_config)
    inp = fq.input_names[0]
    obs = RangeObserver()
    seen = 0
    for batch in data_iter:
        if seen >= cfg.calibration_batches:
            break
        x = batch[0] if isinstance(batch, tuple) else batch
        run(fq, {inp: x}, observer=obs)
        seen += 1
    if seen == 0:
        raise NoData("calibration data iterator yielded no batches")
    out = {}
    for name, pairs in obs.batches.items():
        if cfg.global_minmax:
            r = RangeSpec(min(p[0] for p in pairs), max(p[1] for p in pairs))
        else:
            r = _ema_range(pairs, cfg.range_momentum)
        out[name] = list(relax_range(r))
    return out


def batch_iter(images, batch_size: int, limit: int | None = None):
    n = len(images)
    count = 0
    for i in range(0, n, batch_size):
        if limit is not None and count >= limit:
            return
        yield images[i:i + batch_size]
        count += 1


# ---------------------------------------------------------------------------
# integer model
# ---------------------------------------------------------------------------

@dataclass
class IntOp:
    op: str  # quantize, conv, depthwise, fc, add, concat, avgpool, relu, relu6, dequantize
    name: str
    inputs: tuple[str, ...]
    qp: QuantParams | None
    attrs: dict = field(default_factory=dict)
    plan: ik.QConvPlan | None = None


@dataclass
class IntegerModel:
    ops: list[IntOp]
    input_name: str
    outputs: tuple[str, ...]
    cfg: PTQConfig = PTQConfig()

    def run(self, x, timings: dict | None = None, keep_codes: bool = False) -> dict[str, np.ndarray]:
        """Quantize ``x``, execute every op on integer codes, dequantize the outputs."""
        vals: dict[str, np.ndarray] = {}
        qps: dict[str, QuantParams] = {}
        for o in self.ops:
            t0 = time.perf_counter()
            if o.op == "quantize":
                y = quantize_with(np.asarray(x, dtype=np.float64), [o.qp])
            elif o.op in ("conv", "depthwise", "fc"):
                y = ik.qconv2d(o.plan, vals[o.inputs[0]])
            elif o.op == "add":
                a, b = o.inputs
                y = ik.qadd(vals[a], qps[a], vals[b], qps[b], o.qp, o.attrs.get("activation"))
            elif o.op == "concat":
                y = ik.qconcat([(vals[i], qps[i]) for i in o.inputs], o.attrs.get("axis", -1), o.qp)
            elif o.op == "avgpool":
                i = o.inputs[0]
                y = ik.qavgpool(vals[i], qps[i], o.qp, o.attrs["k"], o.attrs.get("stride"))
                lo, hi = ik.activation_clamp(o.qp, o.attrs.get("activation"))
                y = np.clip(y, lo, hi)
            elif o.op in ("relu", "relu6"):
                i = o.inputs[0]
                y = ik.rescale_codes(vals[i], qps[i], o.qp)
                y = np.clip(y, *ik.activation_clamp(o.qp, o.op))
            elif o.op == "dequantize":
                i = o.inputs[0]
                y = dequantize_with(vals[i], [qps[i]])
            else:  # pragma: no cover
                raise UnsupportedTopology(f"unknown integer op {o.op}")
            vals[o.name] = y
            if o.qp is not None:
                qps[o.name] = o.qp
            if timings is not None:
                timings[o.name] = timings.get(o.name, 0.0) + time.perf_counter() - t0
        if keep_codes:
            return vals
        return {k: vals[k] for k in self.outputs}

    def predict(self, images, batch_size: int = 500, timings: dict | None = None) -> np.ndarray:
        out = [self.run(images[i:i + batch_size], timings)[self.outputs[0]] for i in range(0, len(images), batch_size)]
        return np.concatenate(out)


def _range_for(ranges: Mapping[str, Sequence[float]], tensor: str) -> RangeSpec:
    for key in (f"{tensor}/act_fq", tensor):
        if key in ranges and ranges[key] is not None:
            return RangeSpec(*ranges[key])
    raise MissingRange(tensor)


def convert(g: Graph, ranges: Mapping[str, Sequence[float]], cfg: PTQConfig = PTQConfig()) -> IntegerModel:
    """Lower a folded float graph plus activation ranges to an :class:`IntegerModel`.

    Activations that follow a linear op, add or pool are fused into that op's
    output clamp, matching where fake quantization sits during training.
    """
    _require_folded(g)
    if g.has_fake_quant():
        raise UnsupportedTopology("convert expects the float graph, not a fake-quantized one")
    boundaries = set(activation_boundaries(g))
    cons = g.consumers()
    fused: set[str] = set()
    mat: dict[str, QuantParams] = {}
    ops: list[IntOp] = []

    def act_qp(tensor: str) -> QuantParams:
        return activation_params(_range_for(ranges, tensor), cfg.activation_bits)

    def source(name: str) -> str:
        if name not in mat:
            raise UnsupportedTopology(f"tensor {name!r} is not materialized in the integer model")
        return name

    def fuse_end(n):
        following = cons.get(n.name, [])
        if len(following) == 1 and following[0].op in ACTIVATIONS:
            f = following[0]
            fused.add(f.name)
            return f.name, "relu" if f.op is Op.RELU else "relu6"
        if n.name not in boundaries:
            raise UnsupportedTopology(f"{n.name}: output is neither quantized nor fusable")
        return n.name, None

    inputs = g.input_names
    if len(inputs) != 1:
        raise UnsupportedTopology("integer models take exactly one input")
    for n in g.nodes:
        if n.name in fused:
            continue
        op = n.op
        if op is Op.INPUT:
            qp = act_qp(n.name)
            ops.append(IntOp("quantize", n.name, (), qp))
            mat[n.name] = qp
        elif op in LINEAR_OPS:
            x = source(n.inputs[0])
            end, act = fuse_end(n)
            qp_y = act_qp(end)
            w = g.constants[n.inputs[1]]
            codes, p = quantize_weight(w, op, cfg)
            bias = g.constants[n.inputs[2]] if len(n.inputs) > 2 else None
            kind = {Op.CONV2D: "conv", Op.DEPTHWISE: "depthwise", Op.FC: "fc"}[op]
            stride, padding = n.attrs.get("stride", 1), n.attrs.get("padding", "SAME")
            plan = ik.plan_qconv(codes, p, mat[x], qp_y, bias, kind, stride, padding, act)
            attrs = {"stride": stride, "padding": padding, "activation": act, "source": n.name}
            ops.append(IntOp(kind, end, (x,), qp_y, attrs, plan))
            mat[end] = qp_y
        elif op is Op.ADD:
            a, b = source(n.inputs[0]), source(n.inputs[1])
            end, act = fuse_end(n)
            qp_y = act_qp(end)
            ops.append(IntOp("add", end, (a, b), qp_y, {"activation": act}))
            mat[end] = qp_y
        elif op is Op.AVGPOOL:
            x = source(n.inputs[0])
            end, act = fuse_end(n)
            qp_y = act_qp(end)
            ops.append(IntOp("avgpool", end, (x,), qp_y,
                             {"k": n.attrs["k"], "stride": n.attrs.get("stride") or n.attrs["k"], "activation": act}))
            mat[end] = qp_y
        elif op is Op.CONCAT:
            xs = tuple(source(i) for i in n.inputs)
            end, act = fuse_end(n)
            if act is not None:
                raise UnsupportedTopology(f"{n.name}: activation after concat is not supported")
            qp_y = act_qp(end)
            ops.append(IntOp("concat", end, xs, qp_y, {"axis": n.attrs.get("axis", -1)}))
            mat[end] = qp_y
        elif op in ACTIVATIONS:
            x = source(n.inputs[0])
            qp_y = act_qp(n.name)
            ops.append(IntOp("relu" if op is Op.RELU else "relu6", n.name, (x,), qp_y))
            mat[n.name] = qp_y
        elif op is Op.OUTPUT:
            ops.append(IntOp("dequantize", n.name, (source(n.inputs[0]),), None))
        else:
            raise UnsupportedTopology(f"{n.name}: {op.value} cannot be converted")
    return IntegerModel(ops, inputs[0], tuple(g.outputs), cfg)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _int_dtype(params: Sequence[QuantParams]):
    return np.int8 if params[0].code_range[0] < 0 else np.uint8


def integer_artifact(m: IntegerModel) -> formats.Artifact:
    tensors = {}
    nodes = []
    for o in m.ops:
        node = {"name": o.name, "op": o.op, "inputs": list(o.inputs), "attrs": o.attrs,
                "qp": None if o.qp is None else o.qp.to_dict()}
        if o.plan is not None:
            wname, bname = f"{o.name}/w_q", f"{o.name}/bias_i32"
            p = list(o.plan.qp_w)
            tensors[wname] = formats.TensorEntry(o.plan.w_q.astype(_int_dtype(p)), params_list_to_dict(p, -1))
            tensors[bname] = formats.TensorEntry(o.plan.bias_i32.astype(np.int32))
            node["inputs"] = [*o.inputs, wname, bname]
            node["qp_x"] = o.plan.qp_x.to_dict()
        nodes.append(node)
    graph = {"nodes": nodes, "input": m.input_name, "outputs": list(m.outputs)}
    meta = {"ptq_config": {k: getattr(m.cfg, k) for k in m.cfg.__dataclass_fields__}}
    return formats.Artifact("integer", tensors, graph, meta)


def integer_model_from_artifact(art: formats.Artifact) -> IntegerModel:
    if art.kind != "integer":
        raise formats.FormatError(f"expected an integer artifact, got {art.kind!r}")
    cfg = PTQConfig.from_dict(art.meta.get("ptq_config", {}))
    ops = []
    for nd in art.graph["nodes"]:
        qp = None if nd["qp"] is None else QuantParams.from_dict(nd["qp"])
        plan = None
        inputs = tuple(nd["inputs"])
        if nd["op"] in ("conv", "depthwise", "fc"):
            x, wname, bname = inputs
            entry = art.tensors[wname]
            p = params_list_from_dict(entry.quant)
            plan = ik.plan_qconv(entry.array, p, QuantParams.from_dict(nd["qp_x"]), qp, None, nd["op"],
                                 nd["attrs"].get("stride", 1), nd["attrs"].get("padding", "SAME"),
                                 nd["attrs"].get("activation"))
            plan = ik.QConvPlan(**{**plan.__dict__, "bias_i32": art.array(bname).astype(np.int64)})
            inputs = (x,)
        ops.append(IntOp(nd["op"], nd["name"], inputs, qp, nd["attrs"], plan))
    return IntegerModel(ops, art.graph["input"], tuple(art.graph["outputs"]), cfg)


def float_artifact(g: Graph, kind: str = "float", meta: dict | None = None) -> formats.Artifact:
    tensors = {k: formats.TensorEntry(np.asarray(v, dtype=np.float32)) for k, v in g.constants.items()}
    return formats.Artifact(kind, tensors, g.to_json(), dict(meta or {}))


def graph_from_artifact(art: formats.Artifact) -> Graph:
    """Float graph from a float/checkpoint/weight-only artifact (weights dequantized)."""
    if art.kind == "integer":
        raise formats.FormatError("integer artifacts have no float graph")
    consts = {}
    for name, e in art.tensors.items():
        if e.quant is not None:
            p = params_list_from_dict(e.quant)
            kind = e.quant.get("kind")
            view = weight_channel_view(e.array.astype(np.int64), kind)
            consts[name] = dequantize_with(view, p, -1).reshape(e.array.shape).astype(np.float32)
        else:
            consts[name] = e.array
    return Graph.from_json(art.graph, consts)


def weight_only_artifact(g: Graph, cfg: PTQConfig = PTQConfig()) -> formats.Artifact:
    """Weights stored as integer codes plus params; biases and activations stay float."""
    _require_folded(g)
    wt = weight_tensors(g)
    tensors = {}
    for name, v in g.constants.items():
        if name in wt:
            codes, p = quantize_weight(v, wt[name], cfg)
            q = params_list_to_dict(p, -1)
            q["kind"] = wt[name].value
            tensors[name] = formats.TensorEntry(codes.astype(_int_dtype(p)), q)
        else:
            tensors[name] = formats.TensorEntry(np.asarray(v, dtype=np.float32))
    meta = {"activations": "float", "weight_bits": cfg.weight_bits,
            "ptq_config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}}
    return formats.Artifact("weight_only", tensors, g.to_json(), meta)


def logical_weight_bytes(art: formats.Artifact) -> float:
    """Quantized weight payload counted at its logical bit width (4-bit codes count half a byte)."""
    total = 0.0
    for e in art.tensors.values():
        if e.quant is not None:
            total += e.array.size * e.quant["n_bits"] / 8
    return total
