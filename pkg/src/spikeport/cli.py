"""Command-line frontend for the conversion pipeline.

Subcommands mirror the pipeline stages: ``gen-fixtures`` materializes
deterministic test models, ``convert`` parses + calibrates + normalizes,
``simulate`` runs the spiking network, ``correlate`` measures
rate/activation agreement, ``evaluate`` produces mAP-versus-time curves,
and ``forward`` runs the analog reference on a tensor file (the hook used
by external exporters to self-check numerical fidelity).

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

import numpy as np

from . import analysis, calibration, detection, engine, fixtures, parsing, snn as snn_mod
from .errors import ToolError
from .ir import load_model, save_model
from .snn import SimConfig, SpikingNetwork
from .tensorio import read_tensor, write_tensor


def _load_and_parse(path):
    raw = parsing.load_raw_model(path)
    return parsing.parse(raw)


def _normalized_activations(parsed, normalized, image):
    """Parsed-model activations mapped into each layer's normalized interval."""
    record = engine.forward(parsed, image[None, ...])
    stats = normalized.normalization
    out = {}
    for node in normalized.nodes:
        if node.kind == "Input":
            continue
        node_stats = stats.for_node(node.id)
        span = node_stats.span().astype(np.float32)
        out[node.id] = (record[node.id][0] - node_stats.lo.astype(np.float32)) / span
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_convert(args) -> int:
    for stage, path in (("model", args.model), ("calibration batch", args.calib)):
        if not os.path.exists(path):
            raise ToolError(f"{stage} file not found: {path}")
    try:
        parsed = _load_and_parse(args.model)
    except ToolError as exc:
        raise ToolError(f"parse: {exc}") from exc
    calib = read_tensor(args.calib)
    try:
        stats = calibration.collect_stats(parsed, calib, p_lo=args.p_lo, p_hi=args.p_hi)
        normalized = calibration.normalize_model(parsed, stats)
    except ToolError as exc:
        raise ToolError(f"normalize: {exc}") from exc
    save_model(normalized, args.out)
    stats_path = os.path.splitext(args.out)[0] + ".stats.json"
    calibration.save_stats(normalized.normalization, stats_path)
    probe = calib[: min(len(calib), 64)]
    report = calibration.verify_normalization(parsed, normalized, probe)
    print(report.summary())
    print(f"wrote {args.out} and {stats_path}")
    return 0


def _sim_config(args) -> SimConfig:
    return SimConfig(
        duration=args.duration, dt=args.dt,
        transient=getattr(args, "transient", 0.0) or 0.0,
    )


def cmd_simulate(args) -> int:
    model = load_model(args.model)
    if not model.is_normalized():
        raise ToolError(f"{args.model}: model is not normalized; run convert first")
    config = _sim_config(args)
    record_set = (
        set(model.outputs) if args.record == "outputs"
        else {r.strip() for r in args.record.split(",") if r.strip()}
    )
    network = SpikingNetwork(model, config)
    for image_path in args.image:
        image = read_tensor(image_path)
        if image.ndim == len(model.input_shape) + 1:
            if image.shape[0] != 1:
                raise ToolError(f"{image_path}: simulate takes one image at a time")
            image = image[0]
        result = snn_mod.run(
            network, image, config, record=record_set,
            raster=bool(args.raster_out), snapshot_every=50,
        )
        stem = os.path.splitext(os.path.basename(image_path))[0]
        if args.rates_out:
            path = args.rates_out if len(args.image) == 1 else (
                f"{os.path.splitext(args.rates_out)[0]}_{stem}.csv"
            )
            snn_mod.write_rates_csv(result, path)
            print(f"rates -> {path}")
        if args.raster_out:
            os.makedirs(args.raster_out, exist_ok=True)
            for node_id in record_set:
                safe = node_id.replace("/", "_")
                raster_path = os.path.join(args.raster_out, f"{stem}_{safe}.spk")
                snn_mod.dump_raster(
                    result, node_id, model.node(node_id).output_shape, raster_path
                )
                print(f"raster[{node_id}] -> {raster_path}")
        for node_id in sorted(record_set):
            rates = result.rates[node_id]
            print(
                f"{image_path} {node_id}: mean rate {rates.mean():.4f}, "
                f"max {rates.max():.4f}"
            )
    return 0


def cmd_correlate(args) -> int:
    timestamps = [float(t) for t in args.at.split(",") if t.strip()]
    if not timestamps or min(timestamps) <= 0:
        raise ToolError("--at needs positive timestamps (no post-transient steps at 0)")
    parsed = _load_and_parse(args.model)
    normalized = load_model(args.normalized)
    if not normalized.is_normalized():
        raise ToolError(f"{args.normalized}: not a normalized model")
    image = read_tensor(args.image)
    if image.ndim == len(normalized.input_shape) + 1:
        image = image[0]

    config = SimConfig(duration=max(args.duration, max(timestamps)))
    layers = [n.id for n in normalized.nodes if n.kind != "Input"]
    analog = _normalized_activations(parsed, normalized, image)

    network = SpikingNetwork(normalized, config)
    steps_wanted = sorted({int(round(t / config.dt)) for t in timestamps})
    snapshots: dict[int, dict[str, np.ndarray]] = {}
    network.reset(config)
    for step in range(1, max(steps_wanted) + 1):
        network.step(image)
        if step in steps_wanted:
            snapshots[step] = network.rates()

    os.makedirs(args.out_dir, exist_ok=True)
    for step in steps_wanted:
        rates = snapshots[step]
        if args.self_check:
            rates = {k: np.clip(v, 0.0, 1.0) for k, v in analog.items()}
        report = analysis.correlate(analog, rates, layers, time_ms=step * config.dt)
        path = os.path.join(args.out_dir, f"correlation_{step}ms.csv")
        analysis.write_correlation_csv(report, path)
        for node_id in layers:
            r = report.coefficient(node_id)
            shown = "undefined" if r is None else f"{r:+.6f}"
            print(f"t={step * config.dt:g}ms {node_id}: r = {shown}")
        print(f"scatter -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    parsed = _load_and_parse(args.model)
    normalized = load_model(args.normalized)
    if not normalized.is_normalized():
        raise ToolError(f"{args.normalized}: not a normalized model")
    if len(normalized.outputs) < 2 or len(normalized.outputs) % 2:
        raise ToolError(
            "evaluate needs a detector-shaped model: (class, box) head pairs"
        )
    dataset = detection.load_dataset(args.dataset)
    if len(dataset) == 0:
        raise ToolError(f"{args.dataset}: dataset is empty")
    anchors = detection.AnchorConfig.from_json(args.anchors)
    config = SimConfig(duration=args.duration)
    network = SpikingNetwork(normalized, config)
    series = detection.map_convergence(
        network, dataset, config, args.sample_every, anchors, analog_model=parsed
    )
    detection.write_map_csv(series, args.out)
    ann = series.analog_report.mean_ap
    final = series.mean_ap[-1] if series.mean_ap else None
    print(f"analog reference: {series.analog_report.summary()}")
    shown = "undefined" if final is None else f"{final:.4f}"
    print(f"snn mAP at {series.times_ms[-1]:g}ms: {shown}")
    if ann is not None and final is not None:
        print(f"gap: {abs(ann - final) * 100:.2f} points")
    print(f"series -> {args.out}")
    return 0


def cmd_gen_fixtures(args) -> int:
    spec = fixtures.FixtureSpec(
        kind=args.kind, seed=args.seed, count=args.count, image_size=args.image_size
    )
    info = fixtures.write_fixture(spec, args.out_dir)
    print(f"{info['kind']} (seed {info['seed']}, count {info['count']}) -> {args.out_dir}")
    for name in info["files"]:
        print(f"  {name}")
    return 0


def cmd_forward(args) -> int:
    model = (
        parsing.load_raw_model(args.model) if args.raw else load_model(args.model)
    )
    batch = read_tensor(args.input)
    if batch.ndim == len(model.input_shape):
        batch = batch[None, ...]
    outputs = engine.forward_outputs(model, batch)
    os.makedirs(args.out_dir, exist_ok=True)
    for node_id, tensor in zip(model.outputs, outputs):
        safe = node_id.replace("/", "_")
        path = os.path.join(args.out_dir, f"out_{safe}.tns")
        write_tensor(path, tensor)
        print(f"{node_id} {tuple(tensor.shape)} -> {path}")
    return 0


# ---------------------------------------------------------------------------
# Wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikeport",
        description="Convert conv nets to rate-coded spiking networks and measure fidelity.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="parse, calibrate, and normalize a model")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True, help="calibration batch (.tns)")
    p.add_argument("--p-lo", type=float, default=0.01)
    p.add_argument("--p-hi", type=float, default=99.99)
    p.add_argument("--out", required=True, help="normalized manifest path")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("simulate", help="run the spiking network on images")
    p.add_argument("--model", required=True, help="normalized manifest")
    p.add_argument("--image", required=True, action="append", help="input image (.tns)")
    p.add_argument("--duration", type=float, default=1000.0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--transient", type=float, default=0.0)
    p.add_argument("--record", default="outputs",
                   help="comma-separated node ids, or 'outputs'")
    p.add_argument("--raster-out", default=None, help="directory for raster dumps")
    p.add_argument("--rates-out", default=None, help="rate time-series CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="rate/activation correlation at timestamps")
    p.add_argument("--model", required=True, help="analog model manifest")
    p.add_argument("--normalized", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--duration", type=float, default=2000.0)
    p.add_argument("--at", required=True, help="comma-separated timestamps in ms")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--self-check", action="store_true",
                   help="replace rates by analog values; expect r = 1")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("evaluate", help="mAP-versus-time on an annotated dataset")
    p.add_argument("--model", required=True, help="analog model manifest")
    p.add_argument("--normalized", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--duration", type=float, default=1000.0)
    p.add_argument("--sample-every", type=float, default=50.0)
    p.add_argument("--anchors", required=True, help="anchor config JSON")
    p.add_argument("--out", default="map_series.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-fixtures", help="write deterministic fixture models")
    p.add_argument("--kind", required=True, choices=fixtures.FIXTURE_KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=0, help="0 = kind default")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_fixtures)

    p = sub.add_parser("forward", help="analog forward pass on a tensor file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="input batch (.tns)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--raw", action="store_true",
                   help="accept SubNetwork/BatchNorm/Relu nodes")
    p.set_defaults(func=cmd_forward)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ToolError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
