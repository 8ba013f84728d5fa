"""Stages 3-4: build the integrate-and-fire network and simulate it.

Every analog neuron becomes one IF unit. Per timestep, in topological
order (spikes cross the whole depth within a step):

    z = v_th * (weighted sum of predecessor spikes + bias * dt)
    V <- V + z - v_th * fired_last_step
    fire this step iff V >= v_th

Reset is by subtraction, applied on the step after the spike. Nodes fed
directly by the Input node receive the image itself as a constant current
instead of spikes. Pooling, upsampling, and flattening nodes also carry IF
units; driven by 0/v_th currents they reproduce their input spike trains
exactly (upsample/flatten) or integrate window averages (pooling).

Rates are spikes per step over the post-transient window, so they live in
[0, 1] and approximate the normalized activations directly. The membrane
is not touched at the transient boundary; only spike counting restarts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import SimulationError
from .ir import ModelGraph, infer_shapes, topological_order

RASTER_MAGIC = b"SPK1"


@dataclass
class SimConfig:
    duration: float = 1000.0   # ms
    dt: float = 1.0            # ms per step
    v_th: float = 1.0
    transient: float = 0.0     # ms of spikes to ignore when computing rates

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise SimulationError(f"dt must be positive, got {self.dt}")
        if self.duration < self.dt:
            raise SimulationError(
                f"duration {self.duration} shorter than one step ({self.dt})"
            )
        if not 0 <= self.transient < self.duration:
            raise SimulationError(
                f"transient {self.transient} must lie in [0, duration={self.duration})"
            )
        if self.v_th <= 0:
            raise SimulationError(f"v_th must be positive, got {self.v_th}")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def transient_steps(self) -> int:
        return int(round(self.transient / self.dt))


@dataclass
class IFLayerState:
    """Membrane state of one layer's population."""

    v: np.ndarray            # membrane potential, float64
    prev_spike: np.ndarray   # 0/1 spikes from the previous step, float32
    spike_count: np.ndarray  # post-transient spikes, int64
    total_count: np.ndarray  # all spikes, int64 (conservation bookkeeping)
    z_sum: np.ndarray        # accumulated input current, float64

    @classmethod
    def zeros(cls, shape) -> "IFLayerState":
        return cls(
            v=np.zeros(shape, dtype=np.float64),
            prev_spike=np.zeros(shape, dtype=np.float32),
            spike_count=np.zeros(shape, dtype=np.int64),
            total_count=np.zeros(shape, dtype=np.int64),
            z_sum=np.zeros(shape, dtype=np.float64),
        )


@dataclass
class RateRecord:
    """Rates and optional rasters/time series from one simulation run."""

    rates: dict[str, np.ndarray]
    steps: int
    post_steps: int
    config: SimConfig
    rasters: dict[str, np.ndarray] = field(default_factory=dict)
    series: dict[str, list[tuple[float, np.ndarray]]] = field(default_factory=dict)


class SpikingNetwork:
    """IF mirror of a normalized model graph."""

    def __init__(self, model: ModelGraph, config: SimConfig):
        if not model.is_normalized():
            raise SimulationError(
                "refusing to build a spiking network from an unnormalized model; "
                "run the calibrator first"
            )
        infer_shapes(model)
        self.model = model
        self.config = config
        self.order = topological_order(model)
        self.nodes = model.node_map()
        self.input_id = next(n.id for n in model.nodes if n.kind == "Input")
        self.state: dict[str, IFLayerState] = {}
        self.scaled_bias: dict[str, np.ndarray | None] = {}
        self.step_index = 0
        self._prepare()

    def _prepare(self) -> None:
        dt = self.config.dt
        for node in self.model.nodes:
            if node.kind == "Input":
                continue
            self.state[node.id] = IFLayerState.zeros(node.output_shape)
            if node.kind in ("Conv2D", "Dense") and node.bias is not None:
                self.scaled_bias[node.id] = (node.bias * np.float32(dt))
            elif node.kind == "NormAdd":
                self.scaled_bias[node.id] = (
                    np.asarray(node.attrs["shared_bias"], dtype=np.float32) * np.float32(dt)
                )
            else:
                self.scaled_bias[node.id] = None

    def reset(self, config: SimConfig | None = None) -> None:
        if config is not None:
            self.config = config
        self.step_index = 0
        self.state = {}
        self.scaled_bias = {}
        self._prepare()

    def _input_current(self, node, signals: list[np.ndarray]) -> np.ndarray:
        kind = node.kind
        if kind == "Conv2D":
            z = engine.conv2d(
                signals[0][None, ...], node.weights, self.scaled_bias[node.id],
                int(node.attrs.get("stride", 1)), node.attrs.get("padding", "same"),
            )[0]
        elif kind == "Dense":
            z = engine.dense(signals[0][None, ...], node.weights, self.scaled_bias[node.id])[0]
        elif kind == "NormAdd":
            z = engine.norm_add(
                [s[None, ...] for s in signals],
                node.attrs["branch_scales"], self.scaled_bias[node.id],
            )[0]
        elif kind == "Add":
            z = signals[0].copy()
            for other in signals[1:]:
                z += other
        elif kind == "AvgPool2D":
            z = engine.avg_pool(signals[0][None, ...], int(node.attrs["pool"]))[0]
        elif kind == "UpsampleNearest":
            z = engine.upsample_nearest(signals[0][None, ...], int(node.attrs["factor"]))[0]
        elif kind == "Flatten":
            z = signals[0].reshape(-1)
        else:
            raise SimulationError(f"node '{node.id}': kind '{kind}' cannot spike")
        return z.astype(np.float64) * self.config.v_th

    def step(self, input_current: np.ndarray) -> dict[str, np.ndarray]:
        """Advance one timestep; returns this step's spikes per node."""
        if tuple(input_current.shape) != tuple(self.model.input_shape):
            raise SimulationError(
                f"input shape {input_current.shape} does not match model input "
                f"{self.model.input_shape}"
            )
        self.step_index += 1
        counting = self.step_index > self.config.transient_steps
        v_th = self.config.v_th
        signals: dict[str, np.ndarray] = {
            self.input_id: np.asarray(input_current, dtype=np.float32)
        }
        spikes: dict[str, np.ndarray] = {}
        for node_id in self.order:
            node = self.nodes[node_id]
            if node.kind == "Input":
                continue
            state = self.state[node_id]
            z = self._input_current(node, [signals[r] for r in node.inputs])
            state.z_sum += z
            state.v += z - v_th * state.prev_spike
            fired = state.v >= v_th
            state.prev_spike = fired.astype(np.float32)
            state.total_count += fired
            if counting:
                state.spike_count += fired
            signals[node_id] = state.prev_spike
            spikes[node_id] = state.prev_spike
        return spikes

    def rates(self) -> dict[str, np.ndarray]:
        post = self.step_index - self.config.transient_steps
        if post <= 0:
            raise SimulationError("no post-transient steps simulated yet")
        return {
            node_id: (state.spike_count / post).astype(np.float32)
            for node_id, state in self.state.items()
        }

    def conservation_residual(self) -> float:
        """Largest |v_th * spikes + dV - sum(z)| over all neurons.

        Follows from unrolling the membrane update; the reset for a spike on
        the final step is still pending, so it is applied to the final
        potential before comparing.
        """
        worst = 0.0
        v_th = self.config.v_th
        for state in self.state.values():
            settled = state.v - v_th * state.prev_spike.astype(np.float64)
            residual = v_th * state.total_count + settled - state.z_sum
            if residual.size:
                worst = max(worst, float(np.max(np.abs(residual))))
        return worst


def build_snn(normalized: ModelGraph, config: SimConfig) -> SpikingNetwork:
    return SpikingNetwork(normalized, config)


def run(snn: SpikingNetwork, image: np.ndarray, config: SimConfig | None = None,
        record: set[str] | None = None, raster: bool = False,
        snapshot_every: int | None = None) -> RateRecord:
    """Reset and simulate the full window on one image.

    ``record`` limits which layers appear in the result (default: model
    outputs). ``snapshot_every`` captures running rates every that many
    steps after the transient, timestamped in ms.
    """
    snn.reset(config)
    cfg = snn.config
    image = np.asarray(image, dtype=np.float32)
    recorded = set(record) if record is not None else set(snn.model.outputs)
    unknown = recorded - set(snn.state)
    if unknown:
        raise SimulationError(f"cannot record unknown layers: {sorted(unknown)}")

    raster_bits: dict[str, list[np.ndarray]] = {r: [] for r in recorded} if raster else {}
    series: dict[str, list[tuple[float, np.ndarray]]] = {r: [] for r in recorded}
    for step in range(1, cfg.steps + 1):
        spikes = snn.step(image)
        if raster:
            for r in recorded:
                raster_bits[r].append(np.packbits(spikes[r].ravel() > 0))
        post = step - cfg.transient_steps
        if snapshot_every and post > 0 and (step % snapshot_every == 0 or step == cfg.steps):
            for r in recorded:
                series[r].append(
                    (step * cfg.dt, (snn.state[r].spike_count / post).astype(np.float32))
                )

    post_steps = cfg.steps - cfg.transient_steps
    rates = {r: (snn.state[r].spike_count / post_steps).astype(np.float32) for r in recorded}
    return RateRecord(
        rates=rates,
        steps=cfg.steps,
        post_steps=post_steps,
        config=cfg,
        rasters={r: np.stack(bits) for r, bits in raster_bits.items()} if raster else {},
        series=series if snapshot_every else {},
    )


# ---------------------------------------------------------------------------
# Dump formats


def dump_raster(record: RateRecord, node_id: str, shape, path) -> None:
    """Write one layer's raster: header + step-major packed spike bits."""
    bits = record.rasters[node_id]
    ident = node_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<H", len(ident)))
        fh.write(ident)
        fh.write(struct.pack("<I", len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<I", bits.shape[0]))
        fh.write(bits.tobytes())


def load_raster(path) -> tuple[str, tuple[int, ...], np.ndarray]:
    """Read a raster dump back as (node id, shape, bool array (steps, neurons))."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != RASTER_MAGIC:
        raise SimulationError(f"{path}: not a raster file")
    (id_len,) = struct.unpack_from("<H", raw, 4)
    cursor = 6
    node_id = raw[cursor:cursor + id_len].decode("utf-8")
    cursor += id_len
    (rank,) = struct.unpack_from("<I", raw, cursor)
    cursor += 4
    shape = struct.unpack_from(f"<{rank}I", raw, cursor)
    cursor += 4 * rank
    (steps,) = struct.unpack_from("<I", raw, cursor)
    cursor += 4
    neurons = int(np.prod(shape))
    packed = np.frombuffer(raw, dtype=np.uint8, offset=cursor).reshape(steps, -1)
    bits = np.unpackbits(packed, axis=1)[:, :neurons].astype(bool)
    return node_id, tuple(shape), bits


def write_rates_csv(record: RateRecord, path) -> None:
    """Time series of rate summaries: step, node id, mean, min, max."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,node_id,mean_rate,min_rate,max_rate\n")
        for node_id, snapshots in record.series.items():
            for time_ms, rates in snapshots:
                step = int(round(time_ms / record.config.dt))
                fh.write(
                    f"{step},{node_id},{float(rates.mean()):.8f},"
                    f"{float(rates.min()):.8f},{float(rates.max()):.8f}\n"
                )
        for node_id, rates in record.rates.items():
            if not record.series.get(node_id):
                fh.write(
                    f"{record.steps},{node_id},{float(rates.mean()):.8f},"
                    f"{float(rates.min()):.8f},{float(rates.max()):.8f}\n"
                )
