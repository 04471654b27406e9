"""``qtz`` command-line driver.

Exit codes
    0  success
    1  unexpected internal error
    2  configuration or usage error (bad TOML, unknown field, bad scheme/bits, wrong artifact kind)
    3  data error (missing or malformed dataset / artifact files)
    4  missing activation range during conversion

stdout carries one JSON object per invocation; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, data, formats, ptq
from .graph_ir import BN_OPS, Graph, GraphError, MissingRange, fold_bn_eval
from .qat_train import (METRIC_COLUMNS, ReferenceCNN, TrainConfig, checkpoint_artifact, model_from_artifact,
                        train)

log = logging.getLogger("qtz")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_RANGE = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def read_toml(path) -> dict:
    import tomli

    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def _inf_to_none(d: dict, *keys) -> dict:
    d = dict(d)
    for k in keys:
        v = d.get(k)
        if isinstance(v, float) and math.isinf(v):
            d[k] = None
    return d


def train_config(d: dict) -> TrainConfig:
    d = _inf_to_none(d, "quant_delay", "freeze_bn_delay")
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train config: {e}") from None


def ptq_config(d: dict) -> ptq.PTQConfig:
    try:
        return ptq.PTQConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"ptq config: {e}") from None


def _load_artifact(path, kinds=None) -> formats.Artifact:
    if not Path(path).exists():
        raise data.DataError(f"model file not found: {path}")
    art = formats.load(path)
    if kinds is not None and art.kind not in kinds:
        raise ConfigError(f"{path}: expected a {' or '.join(kinds)} artifact, got {art.kind!r}")
    return art


def _folded_graph(art: formats.Artifact) -> Graph:
    g = ptq.graph_from_artifact(art)
    return fold_bn_eval(g) if any(n.op in BN_OPS for n in g.nodes) else g


def _maybe_split(directory, split):
    try:
        return data.load_split(directory, split)
    except data.DataError:
        return None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    info = data.export(a.out, a.source, a.seed, a.n_train, a.n_test)
    _emit(info)
    return EXIT_OK


def cmd_train(a) -> int:
    cfg_dict = read_toml(a.config) if a.config else {}
    if a.steps is not None:
        cfg_dict["total_steps"] = a.steps
    if a.seed is not None:
        cfg_dict["rng_seed"] = a.seed
    cfg = train_config(cfg_dict)
    images, labels = data.load_split(a.data, "train")
    test = _maybe_split(a.data, "test")
    if a.init:
        model = model_from_artifact(_load_artifact(a.init, ("checkpoint", "float")))
    else:
        model = ReferenceCNN.init(np.random.default_rng(cfg.rng_seed), input_shape=images.shape[1:],
                                  bn_momentum=cfg.bn_momentum)
    model, metrics = train(model, (images, labels), cfg, eval_data=test)
    formats.save(a.out, checkpoint_artifact(model, cfg))
    metrics_path = a.metrics or f"{a.out}.metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        wr = csv.DictWriter(f, METRIC_COLUMNS)
        wr.writeheader()
        wr.writerows(metrics)
    last = next((r for r in reversed(metrics) if r["eval_acc_inst"] == r["eval_acc_inst"]), None)
    _emit({"checkpoint": str(a.out), "metrics": str(metrics_path), "steps": len(metrics),
           "final_loss": metrics[-1]["loss"] if metrics else None,
           "eval_acc": None if last is None else last["eval_acc_inst"]})
    return EXIT_OK


def cmd_quantize_weights(a) -> int:
    art = _load_artifact(a.model)
    if art.kind in ("weight_only", "integer"):
        raise ConfigError(f"{a.model} is already quantized ({art.kind})")
    cfg = ptq_config({"weight_scheme": a.scheme, "weight_granularity": a.granularity, "weight_bits": a.bits})
    g = _folded_graph(art)
    float_art = ptq.float_artifact(g)
    q = ptq.weight_only_artifact(g, cfg)
    formats.save(a.out, q)
    wnames = list(ptq.weight_tensors(g))
    float_w = float_art.payload_bytes(wnames)
    q_w = q.payload_bytes(wnames)
    _emit({"artifact": str(a.out), "float_weight_bytes": float_w, "quantized_weight_bytes": q_w,
           "payload_ratio": q_w / float_w, "logical_ratio": ptq.logical_weight_bytes(q) / float_w,
           "file_bytes": formats.file_size(a.out)})
    return EXIT_OK


def _ptq_from_args(a) -> ptq.PTQConfig:
    d = read_toml(a.config) if getattr(a, "config", None) else {}
    for arg, key in (("scheme", "weight_scheme"), ("granularity", "weight_granularity"), ("bits", "weight_bits"),
                     ("act_bits", "activation_bits"), ("batches", "calibration_batches")):
        v = getattr(a, arg, None)
        if v is not None:
            d[key] = v
    if getattr(a, "global_minmax", False):
        d["global_minmax"] = True
    return ptq_config(d)


def cmd_calibrate(a) -> int:
    cfg = _ptq_from_args(a)
    g = _folded_graph(_load_artifact(a.model, ("float", "checkpoint", "weight_only")))
    images, _ = data.load_split(a.data, a.split)
    ranges = ptq.calibrate(g, ptq.batch_iter(images, a.batch_size), cfg)
    Path(a.out).write_text(json.dumps({"format": formats.FORMAT_VERSION, "kind": "ranges", "ranges": ranges},
                                      indent=1))
    _emit({"ranges": str(a.out), "boundaries": len(ranges), "batches": min(cfg.calibration_batches,
                                                                          -(-len(images) // a.batch_size))})
    return EXIT_OK


def _read_ranges(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise data.DataError(f"ranges file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if d.get("format") != formats.FORMAT_VERSION or "ranges" not in d:
        raise ConfigError(f"{path}: not a qtz ranges file")
    return d["ranges"]


def cmd_convert(a) -> int:
    cfg = _ptq_from_args(a)
    art = _load_artifact(a.model, ("float", "checkpoint"))
    if a.ranges:
        ranges = _read_ranges(a.ranges)
    else:
        stats = art.meta.get("act_stats", {})
        ranges = {k: [min(v[0], 0.0), max(v[1], 0.0)] for k, v in stats.items() if v[3] > 0}
    m = ptq.convert(_folded_graph(art), ranges, cfg)
    out = ptq.integer_artifact(m)
    formats.save(a.out, out)
    _emit({"artifact": str(a.out), "ops": len(m.ops), "file_bytes": formats.file_size(a.out)})
    return EXIT_OK


def cmd_run(a) -> int:
    m = ptq.integer_model_from_artifact(_load_artifact(a.model, ("integer",)))
    images, labels = data.load_split(a.data, a.split)
    timings: dict[str, float] = {}
    logits = m.predict(images, timings=timings)
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    if a.report:
        with open(a.report, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(("kind", "name", "value"))
            wr.writerow(("accuracy", "top1", f"{acc:.6f}"))
            wr.writerow(("count", "samples", len(labels)))
            for name, t in timings.items():
                wr.writerow(("timing_s", name, f"{t:.6f}"))
    _emit({"accuracy": acc, "samples": int(len(labels)), "report": a.report})
    return EXIT_OK


def cmd_analyze(a) -> int:
    art = _load_artifact(a.model, ("float", "checkpoint"))
    g = ptq.graph_from_artifact(art)
    reports = analysis.compare_schemes(g, a.bits)
    written = analysis.write_reports(reports, a.out, analysis.weight_power_report(g))
    _emit({"layers": len({r.layer for r in reports}), "reports": len(reports), **written})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtz", description="Integer-only quantization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write train/test IDX files")
    s.add_argument("--out", required=True)
    s.add_argument("--source", choices=("synthetic", "mnist"), default="synthetic")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=4000)
    s.add_argument("--n-test", type=int, default=1000)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train or fine-tune the reference CNN")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="checkpoint to fine-tune from")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--metrics")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantize-weights", help="weight-only quantized artifact")
    s.add_argument("--model", required=True)
    s.add_argument("--scheme", default="affine")
    s.add_argument("--granularity", default="per_channel")
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize_weights)

    def ptq_args(s):
        s.add_argument("--config")
        s.add_argument("--scheme")
        s.add_argument("--granularity")
        s.add_argument("--bits", type=int)
        s.add_argument("--act-bits", type=int)

    s = sub.add_parser("calibrate", help="activation ranges from sample data")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batches", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--split", default="train", choices=("train", "test"))
    s.add_argument("--global-minmax", action="store_true")
    s.add_argument("--out", required=True)
    ptq_args(s)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("convert", help="integer model from a float model and ranges")
    s.add_argument("--model", required=True)
    s.add_argument("--ranges", help="ranges JSON (default: the checkpoint's training statistics)")
    s.add_argument("--out", required=True)
    ptq_args(s)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("run", help="execute an integer model on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--report")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("analyze", help="per-channel SQNR and weight-power reports")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bits", type=int, default=8)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, stream=sys.stderr,
                        format="qtz: %(levelname)s: %(message)s")
    try:
        return a.func(a)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except MissingRange as e:
        log.error("%s", e)
        return EXIT_RANGE
    except (data.DataError, formats.FormatError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except (GraphError, ValueError) as e:
        log.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
