"""Per-channel SQNR and weight-power diagnostics for quantization schemes."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph_ir import BN_OPS, LINEAR_OPS, Graph, Op, fold_bn_eval, weight_channel_view
from .quant_core import Granularity, Scheme, fake_quant_tensor, tensor_params

SQNR_CAP_DB = 100.0
DEFAULT_SCHEMES = (("affine", "per_layer"), ("symmetric_signed", "per_channel"), ("affine", "per_channel"))


class DegenerateTensor(ValueError):
    pass


def sqnr(w, scheme="symmetric_signed", granularity="per_channel", n_bits: int = 8,
         narrow_range: bool = False) -> np.ndarray:
    """SQNR in dB of each output channel (last axis) of ``w``, capped at 100 dB.

    ``granularity`` only picks how quantizer params are derived; the ratio is
    always taken per output channel.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("sqnr of an empty tensor")
    if w.ndim == 0:
        w = w.reshape(1)
    params = tensor_params(w, Granularity.parse(str(granularity)), Scheme(scheme), n_bits, narrow_range)
    wq, _ = fake_quant_tensor(w, params, -1)
    axes = tuple(range(w.ndim - 1))
    signal = (w ** 2).sum(axis=axes)
    noise = ((w - wq) ** 2).sum(axis=axes)
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10 * np.log10(signal / noise)
    db = np.where(noise == 0, SQNR_CAP_DB, db)
    return np.minimum(np.atleast_1d(db), SQNR_CAP_DB)


def db_bins(values, width: float = 1.0):
    """Histogram of dB values with ``width``-dB bins aligned to multiples of the width."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return np.array([0.0, width]), np.zeros(1, dtype=np.int64)
    lo = math.floor(v.min() / width) * width
    hi = (math.floor(v.max() / width) + 1) * width
    edges = np.arange(lo, hi + width / 2, width)
    counts, edges = np.histogram(v, bins=edges)
    return edges, counts


@dataclass
class PowerHistogram:
    edges_db: np.ndarray
    counts: np.ndarray
    mean_power: float
    max_normalized_power: float


POWER_FLOOR_DB = -60.0


def normalized_power(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    p = np.mean(w ** 2) if w.size else 0.0
    if not p > 0:
        raise DegenerateTensor("weight tensor has zero average power")
    return w.ravel() ** 2 / p


def weight_power_histogram(w, width_db: float = 1.0) -> PowerHistogram:
    """Histogram of ``w^2 / E[w^2]`` in dB (zeros land in the -60 dB floor bin)."""
    w = np.asarray(w, dtype=np.float64)
    npow = normalized_power(w)
    with np.errstate(divide="ignore"):
        db = np.maximum(10 * np.log10(npow), POWER_FLOOR_DB)
    edges, counts = db_bins(db, width_db)
    return PowerHistogram(edges, counts, float(np.mean(w ** 2)), float(npow.max()))


@dataclass
class SqnrReport:
    layer: str
    scheme: str
    granularity: str
    n_bits: int
    sqnr_db: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sqnr_db", "hist_edges", "hist_counts"):
            d[k] = np.asarray(d[k]).tolist()
        return d


def _folded(g: Graph) -> Graph:
    return fold_bn_eval(g) if any(n.op in BN_OPS for n in g.nodes) else g


def compare_schemes(g: Graph, n_bits: int = 8, schemes: Sequence[tuple[str, str]] = DEFAULT_SCHEMES
                    ) -> list[SqnrReport]:
    """Per-layer SQNR of the (BN-folded) weights under each ``(scheme, granularity)``."""
    fg = _folded(g)
    reports = []
    for n in fg.nodes:
        if n.op not in LINEAR_OPS or n.attrs.get("role") == "bn_moments":
            continue
        w = weight_channel_view(np.asarray(fg.constants[n.inputs[1]], dtype=np.float64), n.op)
        for scheme, gran in schemes:
            vals = sqnr(w, scheme, gran, n_bits)
            edges, counts = db_bins(vals)
            reports.append(SqnrReport(n.name, scheme, gran, n_bits, vals, edges, counts))
    return reports


def weight_power_report(g: Graph) -> dict[str, dict]:
    """Max normalized power of every weight before and after batch-norm folding."""
    out = {}
    fg = _folded(g)
    folded_by_layer = {n.name: n for n in fg.nodes if n.op in LINEAR_OPS}
    bn_after = {n.inputs[0]: n.name for n in g.nodes if n.op in BN_OPS}
    for n in g.nodes:
        if n.op not in LINEAR_OPS:
            continue
        before = weight_power_histogram(g.constants[n.inputs[1]])
        entry = {"unfolded": before}
        fname = bn_after.get(n.name, n.name)
        fn = folded_by_layer.get(fname)
        if fn is not None:
            entry["folded"] = weight_power_histogram(fg.constants[fn.inputs[1]])
        out[n.name] = entry
    return out


CSV_COLUMNS = ("layer", "scheme", "granularity", "n_bits", "channel", "sqnr_db")


def write_reports(reports: Sequence[SqnrReport], out_dir, power: dict | None = None) -> dict[str, str]:
    """Write ``sqnr.csv``, ``sqnr.json`` and one ``(x, y)`` histogram series per report."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "sqnr.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_COLUMNS)
        for r in reports:
            for c, v in enumerate(r.sqnr_db):
                wr.writerow([r.layer, r.scheme, r.granularity, r.n_bits, c, f"{v:.6f}"])
    (d / "sqnr.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    series = d / "series"
    series.mkdir(exist_ok=True)
    for r in reports:
        centers = (r.hist_edges[:-1] + r.hist_edges[1:]) / 2
        name = f"sqnr_{r.layer.replace('/', '_')}_{r.scheme}_{r.granularity}.csv"
        with open(series / name, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(("sqnr_db", "channels"))
            wr.writerows(zip(centers.tolist(), r.hist_counts.tolist()))
    written = {"csv": str(d / "sqnr.csv"), "json": str(d / "sqnr.json")}
    if power:
        rows = {}
        for layer, entry in power.items():
            rows[layer] = {}
            for which, h in entry.items():
                rows[layer][which] = {"max_normalized_power": h.max_normalized_power, "mean_power": h.mean_power,
                                      "edges_db": h.edges_db.tolist(), "counts": h.counts.tolist()}
                centers = (h.edges_db[:-1] + h.edges_db[1:]) / 2
                with open(series / f"power_{layer.replace('/', '_')}_{which}.csv", "w", newline="") as f:
                    wr = csv.writer(f)
                    wr.writerow(("normalized_power_db", "count"))
                    wr.writerows(zip(centers.tolist(), h.counts.tolist()))
        (d / "weight_power.json").write_text(json.dumps(rows, indent=1))
        written["power"] = str(d / "weight_power.json")
    return written
