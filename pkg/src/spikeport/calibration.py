"""Stage 2: channel-wise activation statistics and weight normalization.

Each channel's activation distribution is summarized by a low/high
percentile pair (default 0.01th and 99.99th). Normalization rewrites
weights and biases so that, channel by channel, activations map affinely
from [lo, hi] to the unit interval:

    a_norm = (a - lo) / (hi - lo)

For a weighted layer this folds into the parameters in one step: kernels
are scaled by upstream_span / own_span per (input, output) channel pair,
and biases absorb both the upstream shift correction and the layer's own
shift. Elementwise Add nodes cannot absorb anything, so they are replaced
by NormAdd nodes whose per-branch scales and shared bias first undo each
branch's normalization, sum, and renormalize against statistics collected
on the analog sum.

Layers with a relu activation get their low percentile forced to zero: a
positive shift does not commute with relu, and post-relu low percentiles
are zero anyway. This keeps the transform an exact change of variables on
relu networks; the shift stays active on linear layers, where it exists to
carry negative activations into the rate-codable range.

The bias absorption assumes every kernel tap sees real upstream data. With
zero 'same' padding that holds at interior positions only, so a padded
convolution consuming a layer with a nonzero shift is inexact at the
borders; keep shift-carrying layers feeding 1x1 or 'valid' convolutions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import CalibrationError
from .ir import ChannelStats, LayerNode, ModelGraph, NodeStats, infer_shapes, topological_order

DEGENERATE_SPAN = 1e-6
DEFAULT_VALUE_CAP = 1 << 24


def _pool_channelwise(values: np.ndarray) -> np.ndarray:
    """Collapse batch and spatial axes, keeping channels last: (N, C)."""
    return values.reshape(-1, values.shape[-1])


def _subsample(values: np.ndarray, cap: int) -> np.ndarray:
    if values.shape[0] <= cap:
        return values
    idx = np.linspace(0, values.shape[0] - 1, cap).astype(np.int64)
    return values[idx]


def collect_stats(model: ModelGraph, calib: np.ndarray,
                  p_lo: float = 0.01, p_hi: float = 99.99,
                  chunk_size: int = 64, value_cap: int = DEFAULT_VALUE_CAP) -> ChannelStats:
    """Estimate per-channel percentile pairs over a calibration batch.

    Values are pooled per channel across all samples and spatial positions
    of each node's post-activation output. Percentiles use linear
    interpolation between order statistics (rank p/100 * (n-1)). Pools are
    capped at ``value_cap`` values per node by uniform subsampling.
    """
    calib = np.asarray(calib, dtype=np.float32)
    if calib.ndim == 0 or calib.shape[0] == 0:
        raise CalibrationError("empty calibration batch")
    if not 0.0 <= p_lo <= p_hi <= 100.0:
        raise CalibrationError(f"invalid percentile pair ({p_lo}, {p_hi})")
    infer_shapes(model)

    pools: dict[str, list[np.ndarray]] = {}
    for start in range(0, calib.shape[0], chunk_size):
        record = engine.forward(model, calib[start:start + chunk_size])
        for node in model.nodes:
            if node.kind == "Input":
                continue
            pools.setdefault(node.id, []).append(_pool_channelwise(record[node.id]))

    stats = ChannelStats(p_lo=float(p_lo), p_hi=float(p_hi))
    repaired = 0
    for node in model.nodes:
        if node.kind == "Input":
            continue
        if node.output_shape[-1] == 0:
            raise CalibrationError(f"node '{node.id}' has zero channels")
        values = _subsample(np.concatenate(pools[node.id], axis=0), value_cap)
        lo, hi = np.percentile(
            values.astype(np.float64), [p_lo, p_hi], axis=0, method="linear"
        )
        if node.activation == "relu":
            # Shift disabled: relu does not commute with a positive offset,
            # and post-relu low percentiles sit at zero regardless.
            lo = np.zeros_like(lo)
        degenerate = (hi - lo) < DEGENERATE_SPAN
        if np.any(degenerate):
            repaired += int(np.count_nonzero(degenerate))
            lo = np.where(degenerate, 0.0, lo)
            hi = np.where(degenerate, 1.0, hi)
        stats.nodes[node.id] = NodeStats(lo=lo, hi=hi)
    if repaired:
        warnings.warn(
            f"{repaired} degenerate channel(s) repaired to the unit interval",
            stacklevel=2,
        )
    return stats


def save_stats(stats: ChannelStats, path) -> None:
    doc = {
        "p_lo": stats.p_lo,
        "p_hi": stats.p_hi,
        "nodes": {
            node_id: {"epsilon": [float(v) for v in s.lo],
                      "lambda": [float(v) for v in s.hi]}
            for node_id, s in stats.nodes.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_stats(path) -> ChannelStats:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return ChannelStats(
        p_lo=float(doc["p_lo"]),
        p_hi=float(doc["p_hi"]),
        nodes={
            node_id: NodeStats(
                lo=np.asarray(entry["epsilon"], dtype=np.float64),
                hi=np.asarray(entry["lambda"], dtype=np.float64),
            )
            for node_id, entry in doc["nodes"].items()
        },
    )


# ---------------------------------------------------------------------------
# Normalization


def _identity_stats(channels: int) -> NodeStats:
    return NodeStats(lo=np.zeros(channels), hi=np.ones(channels))


def _effective_stats(model: ModelGraph, stats: ChannelStats) -> dict[str, NodeStats]:
    """Interval actually realized at each node's output after normalization.

    Weighted layers and Add nodes land on their own collected percentiles by
    construction. Pooling, upsampling, and flattening pass normalized values
    through untouched, so they inherit their producer's interval (flattening
    tiles the per-channel entries across spatial positions). The Input node
    is the unit interval: images are expected pre-scaled to [0, 1].
    """
    nodes = model.node_map()
    eff: dict[str, NodeStats] = {}
    for node_id in topological_order(model):
        node = nodes[node_id]
        if node.kind == "Input":
            eff[node_id] = _identity_stats(node.output_shape[-1])
        elif node.kind in ("Conv2D", "Dense", "Add", "NormAdd"):
            if node_id not in stats.nodes:
                raise CalibrationError(f"missing stats for node '{node_id}'")
            eff[node_id] = stats.nodes[node_id]
        elif node.kind == "Flatten":
            up = eff[node.inputs[0]]
            spatial = int(np.prod(nodes[node.inputs[0]].output_shape[:-1]))
            eff[node_id] = NodeStats(lo=np.tile(up.lo, spatial), hi=np.tile(up.hi, spatial))
        elif node.kind in ("AvgPool2D", "UpsampleNearest"):
            eff[node_id] = eff[node.inputs[0]]
        else:
            raise CalibrationError(
                f"node '{node_id}': cannot normalize kind '{node.kind}'"
            )
        if node.output_shape[-1] != eff[node_id].lo.size:
            raise CalibrationError(
                f"node '{node_id}': stats cover {eff[node_id].lo.size} channels, "
                f"node has {node.output_shape[-1]}"
            )
    return eff


def synthesize_normadd(add_node: LayerNode, stats: ChannelStats) -> LayerNode:
    """Replace an Add by a NormAdd preserving summation under normalization.

    With branch intervals (lo_b, hi_b) and sum interval (lo_s, hi_s), per
    channel:

        scale_b = (hi_b - lo_b) / (hi_s - lo_s)
        bias    = (sum_b lo_b - lo_s) / (hi_s - lo_s)

    If every branch input equals its normalized activation, the output is
    exactly the normalized analog sum.
    """
    own = stats.for_node(add_node.id)
    span_s = own.span()
    scales = []
    lo_sum = np.zeros_like(own.lo)
    for ref in add_node.inputs:
        branch = stats.for_node(ref)
        if branch.lo.size != own.lo.size:
            raise CalibrationError(
                f"node '{add_node.id}': branch '{ref}' has {branch.lo.size} channels, "
                f"sum has {own.lo.size}"
            )
        scales.append(branch.span() / span_s)
        lo_sum += branch.lo
    bias = (lo_sum - own.lo) / span_s
    return LayerNode(
        id=add_node.id,
        kind="NormAdd",
        activation=add_node.activation,
        attrs={"branch_scales": [s.copy() for s in scales], "shared_bias": bias},
        inputs=list(add_node.inputs),
        output_shape=add_node.output_shape,
    )


def normalize_model(parsed: ModelGraph, stats: ChannelStats) -> ModelGraph:
    """Rewrite weights so every channel's activations target [0, 1].

    Returns a new graph; Add nodes become NormAdd. The effective per-node
    intervals are attached for later denormalization.
    """
    infer_shapes(parsed)
    for node in parsed.nodes:
        if node.kind == "NormAdd":
            raise CalibrationError(f"node '{node.id}': model already normalized")
    eff = _effective_stats(parsed, stats)
    eff_view = ChannelStats(p_lo=stats.p_lo, p_hi=stats.p_hi, nodes=eff)
    nodes_in = parsed.node_map()

    out_nodes: list[LayerNode] = []
    for node_id in topological_order(parsed):
        node = nodes_in[node_id]
        if node.kind in ("Conv2D", "Dense"):
            out_nodes.append(_normalize_weighted(node, eff[node.inputs[0]], eff[node.id]))
        elif node.kind == "Add":
            out_nodes.append(synthesize_normadd(node, eff_view))
        else:
            import copy as _copy

            clone = _copy.copy(node)
            clone.attrs = dict(node.attrs)
            out_nodes.append(clone)

    normalized = ModelGraph(
        name=parsed.name,
        nodes=out_nodes,
        outputs=list(parsed.outputs),
        input_shape=parsed.input_shape,
        normalization=eff_view,
    )
    infer_shapes(normalized)
    return normalized


def _normalize_weighted(node: LayerNode, upstream: NodeStats, own: NodeStats) -> LayerNode:
    span_out = own.span()
    span_in = upstream.span()
    w = node.weights.astype(np.float64)
    if node.kind == "Conv2D":
        scaled = w * span_in[None, None, :, None] / span_out[None, None, None, :]
        tap_sum = w.sum(axis=(0, 1))  # (cin, cout): upstream shift hits every tap
    else:
        scaled = w * span_in[:, None] / span_out[None, :]
        tap_sum = w
    bias = node.bias.astype(np.float64) if node.bias is not None else np.zeros(span_out.size)
    corrected = bias + upstream.lo @ tap_sum - own.lo
    clone = LayerNode(
        id=node.id,
        kind=node.kind,
        activation=node.activation,
        weights=scaled.astype(np.float32),
        bias=(corrected / span_out).astype(np.float32),
        attrs=dict(node.attrs),
        inputs=list(node.inputs),
        output_shape=node.output_shape,
    )
    return clone


# ---------------------------------------------------------------------------
# Verification


@dataclass
class NormalizationReport:
    """Coverage and round-trip accuracy of a normalized model."""

    in_range_fraction: dict[str, float] = field(default_factory=dict)
    denorm_deviation: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst_fraction(self) -> float:
        return min(self.in_range_fraction.values())

    @property
    def max_deviation(self) -> float:
        return max(self.denorm_deviation.values())

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance

    def summary(self) -> str:
        lines = [
            f"{node_id}: in-[0,1] {frac:.6f}, denorm deviation {self.denorm_deviation[node_id]:.2e}"
            for node_id, frac in self.in_range_fraction.items()
        ]
        lines.append(
            f"overall: worst coverage {self.worst_fraction:.6f}, "
            f"max deviation {self.max_deviation:.2e} (tolerance {self.tolerance:.0e})"
        )
        return "\n".join(lines)


def denormalize_values(values: np.ndarray, node_stats: NodeStats) -> np.ndarray:
    """Map unit-interval values back to the original activation range."""
    span = node_stats.span().astype(np.float32)
    return values * span + node_stats.lo.astype(np.float32)


def verify_normalization(parsed: ModelGraph, normalized: ModelGraph,
                         probe: np.ndarray, tolerance: float = 1e-4) -> NormalizationReport:
    """Probe both models; report coverage and denormalized agreement per layer."""
    if normalized.normalization is None:
        raise CalibrationError("model carries no normalization stats")
    ref = engine.forward(parsed, probe)
    norm = engine.forward(normalized, probe)
    eff = normalized.normalization.nodes
    report = NormalizationReport(tolerance=tolerance)
    for node in normalized.nodes:
        values = norm[node.id]
        report.in_range_fraction[node.id] = float(
            np.mean((values >= -1e-6) & (values <= 1.0 + 1e-6))
        )
        if node.kind == "Input":
            report.denorm_deviation[node.id] = 0.0
            continue
        restored = denormalize_values(values, eff[node.id])
        report.denorm_deviation[node.id] = engine.max_relative_deviation(
            restored, ref[node.id]
        )
    return report
