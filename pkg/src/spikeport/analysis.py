"""Conversion fidelity: decode rates back to activations and correlate.

The spiking network's firing rates approximate the normalized model's
activations, so fidelity is measured two ways: Pearson correlation between
rates and normalized analog activations (clipped to [0, 1], so saturation
shows up as correlation loss), and absolute agreement after mapping rates
back through each layer's normalization interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import denormalize_values
from .errors import ShapeError
from .ir import ChannelStats
from .snn import RateRecord


def denormalize(rates: RateRecord | dict[str, np.ndarray],
                stats: ChannelStats) -> dict[str, np.ndarray]:
    """Map per-layer rates back to original activation magnitudes."""
    tensors = rates.rates if isinstance(rates, RateRecord) else rates
    return {
        node_id: denormalize_values(values, stats.for_node(node_id))
        for node_id, values in tensors.items()
    }


@dataclass
class LayerCorrelation:
    pearson: float | None      # None when either side has zero variance
    analog: np.ndarray         # clipped normalized activations, flattened
    rates: np.ndarray          # spike rates, flattened


@dataclass
class CorrelationReport:
    time_ms: float
    layers: dict[str, LayerCorrelation] = field(default_factory=dict)

    def coefficient(self, node_id: str) -> float | None:
        return self.layers[node_id].pearson


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    xd = x - x.mean()
    yd = y - y.mean()
    vx = float(np.dot(xd, xd))
    vy = float(np.dot(yd, yd))
    if vx == 0.0 or vy == 0.0:
        return None
    return float(np.dot(xd, yd) / np.sqrt(vx * vy))


def correlate(analog: dict[str, np.ndarray], rates: RateRecord | dict[str, np.ndarray],
              layers, time_ms: float | None = None) -> CorrelationReport:
    """Pearson correlation per layer between analog activations and rates.

    ``analog`` holds the normalized model's activations for one sample
    (with or without a leading batch-1 axis); values are clipped to [0, 1]
    before comparison. Zero-variance layers report None, not 0.
    """
    if isinstance(rates, RateRecord):
        tensors = rates.rates
        if time_ms is None:
            time_ms = rates.steps * rates.config.dt
    else:
        tensors = rates
        time_ms = time_ms if time_ms is not None else float("nan")
    report = CorrelationReport(time_ms=time_ms)
    for node_id in layers:
        a = np.asarray(analog[node_id])
        r = np.asarray(tensors[node_id])
        if a.size == r.size and a.shape != r.shape:
            a = a.reshape(r.shape)  # drop a leading batch-1 axis
        if a.shape != r.shape:
            raise ShapeError(
                f"layer '{node_id}': analog shape {a.shape} vs rates {r.shape}"
            )
        clipped = np.clip(a.ravel(), 0.0, 1.0)
        flat_rates = r.ravel()
        report.layers[node_id] = LayerCorrelation(
            pearson=_pearson(clipped, flat_rates),
            analog=clipped,
            rates=flat_rates,
        )
    return report


def write_correlation_csv(report: CorrelationReport, path) -> None:
    """Scatter export: layer, neuron index, analog value, rate."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,neuron_index,analog_value,rate\n")
        for node_id, layer in report.layers.items():
            for idx, (a, r) in enumerate(zip(layer.analog, layer.rates)):
                fh.write(f"{node_id},{idx},{a:.8f},{r:.8f}\n")
