"""Reference forward-pass evaluator for model graphs.

This is the analog oracle the rest of the toolkit is measured against:
calibration pools its activations, the spiking simulator's rates are
correlated against them, and parsing/normalization are verified by
comparing outputs through it.

Everything runs in float32 on batched channels-last arrays. Convolution is
cross-correlation (no kernel flip) with zero 'same' padding split
floor-left/ceil-right, accumulated tap by tap in row-major kernel order so
outputs are reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, SimulationError
from .ir import ModelGraph, infer_shapes, topological_order

ActivationRecord = dict[str, np.ndarray]


def conv2d(x: np.ndarray, kernel: np.ndarray, bias, stride: int, padding: str) -> np.ndarray:
    """Batched 2-D cross-correlation on (B, H, W, C) inputs."""
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        pad_h = max((oh - 1) * stride + kh - h, 0)
        pad_w = max((ow - 1) * stride + kw - w, 0)
        x = np.pad(
            x,
            ((0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2), (0, 0)),
        )
    else:
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((b, oh, ow, cout), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i:i + (oh - 1) * stride + 1:stride,
                      j:j + (ow - 1) * stride + 1:stride, :]
            out += patch @ kernel[i, j]
    if bias is not None:
        out += bias
    return out


def dense(x: np.ndarray, kernel: np.ndarray, bias) -> np.ndarray:
    out = x @ kernel
    if bias is not None:
        out += bias
    return out


def avg_pool(x: np.ndarray, pool: int) -> np.ndarray:
    b, h, w, c = x.shape
    return (
        x.reshape(b, h // pool, pool, w // pool, pool, c)
        .mean(axis=(2, 4), dtype=np.float32)
    )


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def norm_add(inputs: list[np.ndarray], scales, offset) -> np.ndarray:
    out = np.zeros_like(inputs[0])
    for branch, scale in zip(inputs, scales):
        out += branch * np.asarray(scale, dtype=np.float32)
    return out + np.asarray(offset, dtype=np.float32)


def _apply_core(node, xs: list[np.ndarray]) -> np.ndarray:
    kind = node.kind
    if kind == "Conv2D":
        return conv2d(
            xs[0], node.weights, node.bias,
            int(node.attrs.get("stride", 1)), node.attrs.get("padding", "same"),
        )
    if kind == "Dense":
        return dense(xs[0], node.weights, node.bias)
    if kind == "Add":
        out = xs[0].copy()
        for other in xs[1:]:
            out += other
        return out
    if kind == "NormAdd":
        return norm_add(xs, node.attrs["branch_scales"], node.attrs["shared_bias"])
    if kind == "AvgPool2D":
        return avg_pool(xs[0], int(node.attrs["pool"]))
    if kind == "UpsampleNearest":
        return upsample_nearest(xs[0], int(node.attrs["factor"]))
    if kind == "Flatten":
        return xs[0].reshape(xs[0].shape[0], -1)
    if kind == "Relu":
        return np.maximum(xs[0], 0)
    if kind == "BatchNorm":
        a = node.attrs
        gamma = np.asarray(a["gamma"], dtype=np.float32)
        beta = np.asarray(a["beta"], dtype=np.float32)
        mean = np.asarray(a["mean"], dtype=np.float32)
        var = np.asarray(a["variance"], dtype=np.float32)
        inv = gamma / np.sqrt(var + np.float32(a.get("eps", 1e-3)))
        return (xs[0] - mean) * inv + beta
    if kind == "SubNetwork":
        return _forward_subnetwork(node, xs)
    raise ShapeError(f"node '{node.id}': cannot evaluate kind '{kind}'")


def _forward_subnetwork(node, xs: list[np.ndarray]) -> np.ndarray:
    inner: ModelGraph = node.attrs["graph"]
    ports = [n for n in inner.nodes if n.kind == "Input"]
    values: ActivationRecord = {p.id: x for p, x in zip(ports, xs)}
    nodes = inner.node_map()
    for node_id in topological_order(inner):
        n = nodes[node_id]
        if n.kind == "Input":
            continue
        values[node_id] = _eval_node(n, [values[ref] for ref in n.inputs])
    return values[inner.outputs[0]]


def _eval_node(node, xs: list[np.ndarray]) -> np.ndarray:
    out = _apply_core(node, xs)
    if node.activation == "relu":
        out = np.maximum(out, 0)
    return out


def forward(model: ModelGraph, batch: np.ndarray, check_finite: bool = True) -> ActivationRecord:
    """Evaluate every node on a batch; returns post-activation values per node.

    ``batch`` has shape (B,) + model.input_shape. Entries keep the batch
    dimension.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if model.input_shape is None:
        infer_shapes(model)
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"batch shape {batch.shape[1:]} does not match model input "
            f"{model.input_shape}"
        )
    nodes = model.node_map()
    record: ActivationRecord = {}
    for node_id in topological_order(model):
        node = nodes[node_id]
        if node.kind == "Input":
            record[node_id] = batch
            continue
        out = _eval_node(node, [record[ref] for ref in node.inputs])
        if check_finite and not np.all(np.isfinite(out)):
            raise SimulationError(f"non-finite activation at node '{node_id}'")
        record[node_id] = out
    return record


def forward_outputs(model: ModelGraph, batch: np.ndarray) -> list[np.ndarray]:
    """Evaluate only the designated outputs, freeing intermediates eagerly."""
    batch = np.asarray(batch, dtype=np.float32)
    if model.input_shape is None:
        infer_shapes(model)
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"batch shape {batch.shape[1:]} does not match model input "
            f"{model.input_shape}"
        )
    nodes = model.node_map()
    uses: dict[str, int] = {n.id: 0 for n in model.nodes}
    for node in model.nodes:
        for ref in node.inputs:
            uses[ref] += 1
    for out in model.outputs:
        uses[out] += 1  # outputs stay live to the end

    live: ActivationRecord = {}
    for node_id in topological_order(model):
        node = nodes[node_id]
        if node.kind == "Input":
            live[node_id] = batch
        else:
            live[node_id] = _eval_node(node, [live[ref] for ref in node.inputs])
        for ref in node.inputs:
            uses[ref] -= 1
            if uses[ref] == 0:
                del live[ref]
    return [live[out] for out in model.outputs]


def max_relative_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Largest elementwise difference relative to the larger tensor's scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)),
                float(np.max(np.abs(b), initial=0.0)), 1e-12)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b))) / scale
