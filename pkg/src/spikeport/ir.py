"""In-memory model graph and its on-disk interchange format.

A model is a directed acyclic graph of layer nodes. On disk it lives in two
files: a UTF-8 JSON manifest describing topology and attributes, and a
companion blob ``<name>.bin`` of little-endian float32 values holding all
weights. Weighted nodes reference the blob through ``{offset, length}``
pairs counted in float32 elements, not bytes, which keeps round-trips
bit-exact: the bytes written are the bytes read back.

Manifest layout::

    {
      "name": "toy",
      "input_shape": [32, 32, 1],
      "outputs": ["head"],
      "nodes": [
        {"id": "c1", "kind": "Conv2D", "activation": "relu",
         "inputs": ["input"],
         "attrs": {"kernel_size": [3, 3], "filters": 8,
                   "stride": 1, "padding": "same"},
         "weights": {"offset": 0, "length": 72},
         "bias": {"offset": 72, "length": 8}},
        ...
      ]
    }

Models that have been normalized additionally carry, per node, a
``"normalization": {"epsilon": [...], "lambda": [...]}`` object with the
per-channel interval each channel's activations were mapped from, plus a
top-level ``"percentiles": {"p_lo": ..., "p_hi": ...}`` record.

Tensors are numpy ``float32`` arrays in channels-last (H, W, C) layout.
Shapes exclude the batch dimension. Conv2D kernels are stored
``(kh, kw, in_channels, out_channels)`` row-major; Dense kernels
``(in, out)``. Graphs and arrays are treated as immutable once loaded.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, ModelFormatError, ShapeError

# Core vocabulary every pipeline stage understands.
CORE_KINDS = frozenset({
    "Input", "Conv2D", "Dense", "Add", "NormAdd",
    "UpsampleNearest", "AvgPool2D", "Flatten",
})
# Raw-only kinds accepted from exporters; the parser fuses them away.
RAW_KINDS = frozenset({"SubNetwork", "BatchNorm", "Relu"})

WEIGHTED_KINDS = frozenset({"Conv2D", "Dense"})
ACTIVATIONS = ("none", "relu")


@dataclass
class NodeStats:
    """Per-channel interval a node's activations are normalized from."""

    lo: np.ndarray  # low percentile, one value per channel
    hi: np.ndarray  # high percentile, one value per channel

    def span(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass
class ChannelStats:
    """Normalization statistics for every non-input node of a graph."""

    p_lo: float
    p_hi: float
    nodes: dict[str, NodeStats] = field(default_factory=dict)

    def for_node(self, node_id: str) -> NodeStats:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"no normalization stats for node '{node_id}'") from None


@dataclass
class LayerNode:
    id: str
    kind: str
    activation: str = "none"
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    attrs: dict = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)
    output_shape: tuple[int, ...] | None = None

    def channel_count(self) -> int:
        if self.output_shape is None:
            raise ShapeError(f"node '{self.id}': shapes not inferred yet")
        return int(self.output_shape[-1])


@dataclass
class ModelGraph:
    name: str
    nodes: list[LayerNode]
    outputs: list[str]
    input_shape: tuple[int, ...] | None = None
    normalization: ChannelStats | None = None

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"no node '{node_id}' in model '{self.name}'")

    def node_map(self) -> dict[str, LayerNode]:
        return {n.id: n for n in self.nodes}

    def is_normalized(self) -> bool:
        return self.normalization is not None


# ---------------------------------------------------------------------------
# Validation


def _check_arity(node: LayerNode, allow_raw: bool) -> None:
    kinds = CORE_KINDS | RAW_KINDS if allow_raw else CORE_KINDS
    if node.kind not in kinds:
        raise ModelFormatError(f"node '{node.id}': unsupported kind '{node.kind}'")
    if node.activation not in ACTIVATIONS:
        raise ModelFormatError(
            f"node '{node.id}': unsupported activation '{node.activation}'"
        )
    n_in = len(node.inputs)
    if node.kind == "Input":
        if n_in != 0:
            raise ModelFormatError(f"node '{node.id}': Input takes no inputs")
    elif node.kind in ("Add", "NormAdd"):
        if n_in < 2:
            raise ModelFormatError(f"node '{node.id}': {node.kind} needs >=2 inputs")
    elif node.kind == "SubNetwork":
        if n_in < 1:
            raise ModelFormatError(f"node '{node.id}': SubNetwork needs >=1 input")
    else:
        if n_in != 1:
            raise ModelFormatError(
                f"node '{node.id}': {node.kind} takes exactly 1 input, got {n_in}"
            )
    if node.kind in WEIGHTED_KINDS:
        if node.weights is None:
            raise ModelFormatError(f"node '{node.id}': {node.kind} requires weights")
    elif node.weights is not None or node.bias is not None:
        raise ModelFormatError(f"node '{node.id}': {node.kind} must not carry weights")


def validate(model: ModelGraph, allow_raw: bool = False) -> None:
    """Check structural invariants; raises on the first violation."""
    seen: set[str] = set()
    for node in model.nodes:
        if node.id in seen:
            raise ModelFormatError(f"duplicate node id '{node.id}'")
        seen.add(node.id)
    for node in model.nodes:
        _check_arity(node, allow_raw)
        for ref in node.inputs:
            if ref not in seen:
                raise GraphError(f"node '{node.id}': dangling input reference '{ref}'")
        if node.kind == "SubNetwork":
            inner = node.attrs["graph"]
            validate(inner, allow_raw=True)
            ports = sum(1 for n in inner.nodes if n.kind == "Input")
            if ports != len(node.inputs):
                raise ModelFormatError(
                    f"node '{node.id}': {len(node.inputs)} inbound edges but nested "
                    f"graph exposes {ports} input port(s)"
                )
            if len(inner.outputs) != 1:
                raise ModelFormatError(
                    f"node '{node.id}': nested graph must have exactly 1 output"
                )
        if node.kind == "BatchNorm":
            var = np.asarray(node.attrs.get("variance", []), dtype=np.float64)
            if var.size == 0 or np.any(var <= 0):
                raise ModelFormatError(
                    f"node '{node.id}': BatchNorm variance must be strictly positive"
                )
    for out in model.outputs:
        if out not in seen:
            raise GraphError(f"output '{out}' does not name a node")
    topological_order(model)  # raises GraphError on cycles


def topological_order(model: ModelGraph) -> list[str]:
    """Node ids ordered so every node follows all its inputs.

    Deterministic: among ready nodes, manifest order wins.
    """
    placed: set[str] = set()
    order: list[str] = []
    pending = list(model.nodes)
    while pending:
        progressed = False
        remaining = []
        for node in pending:
            if all(ref in placed for ref in node.inputs):
                placed.add(node.id)
                order.append(node.id)
                progressed = True
            else:
                remaining.append(node)
        if not progressed:
            stuck = ", ".join(n.id for n in remaining)
            raise GraphError(f"cycle detected among nodes: {stuck}")
        pending = remaining
    return order


# ---------------------------------------------------------------------------
# Shape inference


def _conv_spatial(n: int, k: int, stride: int, padding: str, node_id: str) -> int:
    if padding == "same":
        return -(-n // stride)  # ceil
    if padding == "valid":
        if n < k:
            raise ShapeError(f"node '{node_id}': kernel {k} exceeds input extent {n}")
        return (n - k) // stride + 1
    raise ModelFormatError(f"node '{node_id}': unknown padding '{padding}'")


def _infer_node_shape(node: LayerNode, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    kind = node.kind
    if kind == "Conv2D":
        (s,) = in_shapes
        if len(s) != 3:
            raise ShapeError(f"node '{node.id}': Conv2D needs rank-3 input, got {s}")
        kh, kw = node.attrs["kernel_size"]
        stride = int(node.attrs.get("stride", 1))
        padding = node.attrs.get("padding", "same")
        filters = int(node.attrs["filters"])
        h = _conv_spatial(s[0], kh, stride, padding, node.id)
        w = _conv_spatial(s[1], kw, stride, padding, node.id)
        expected = (kh, kw, s[2], filters)
        if node.weights is not None and node.weights.size != int(np.prod(expected)):
            raise ShapeError(
                f"node '{node.id}': weight length {node.weights.size} does not match "
                f"kernel shape {expected}"
            )
        return (h, w, filters)
    if kind == "Dense":
        (s,) = in_shapes
        if len(s) != 1:
            raise ShapeError(f"node '{node.id}': Dense needs rank-1 input, got {s}")
        units = int(node.attrs["units"])
        if node.weights is not None and node.weights.size != s[0] * units:
            raise ShapeError(
                f"node '{node.id}': weight length {node.weights.size} does not match "
                f"({s[0]}, {units})"
            )
        return (units,)
    if kind in ("Add", "NormAdd"):
        first = in_shapes[0]
        for other in in_shapes[1:]:
            if other != first:
                raise ShapeError(
                    f"node '{node.id}': {kind} input shapes differ: {first} vs {other}"
                )
        return first
    if kind == "AvgPool2D":
        (s,) = in_shapes
        pool = int(node.attrs["pool"])
        if len(s) != 3 or s[0] % pool or s[1] % pool:
            raise ShapeError(
                f"node '{node.id}': pool {pool} does not divide input {s}"
            )
        return (s[0] // pool, s[1] // pool, s[2])
    if kind == "UpsampleNearest":
        (s,) = in_shapes
        factor = int(node.attrs["factor"])
        if len(s) != 3:
            raise ShapeError(f"node '{node.id}': upsample needs rank-3 input, got {s}")
        return (s[0] * factor, s[1] * factor, s[2])
    if kind == "Flatten":
        (s,) = in_shapes
        return (int(np.prod(s)),)
    if kind in ("BatchNorm", "Relu"):
        (s,) = in_shapes
        return s
    if kind == "SubNetwork":
        from .parsing import infer_subnetwork_shape  # avoids an import cycle

        return infer_subnetwork_shape(node, in_shapes)
    raise ModelFormatError(f"node '{node.id}': cannot infer shape for kind '{kind}'")


def infer_shapes(model: ModelGraph, input_shape=None) -> ModelGraph:
    """Populate every node's output_shape in place (idempotent).

    ``input_shape`` overrides the manifest's; exactly one Input node is
    expected at the top level.
    """
    shape = tuple(input_shape) if input_shape is not None else model.input_shape
    if shape is None:
        raise ShapeError(f"model '{model.name}': no input shape available")
    model.input_shape = tuple(int(d) for d in shape)
    nodes = model.node_map()
    input_nodes = [n for n in model.nodes if n.kind == "Input"]
    if len(input_nodes) != 1:
        raise ModelFormatError(
            f"model '{model.name}': expected exactly 1 Input node, "
            f"found {len(input_nodes)}"
        )
    for node_id in topological_order(model):
        node = nodes[node_id]
        if node.kind == "Input":
            node.output_shape = model.input_shape
        else:
            in_shapes = [nodes[ref].output_shape for ref in node.inputs]
            node.output_shape = tuple(
                int(d) for d in _infer_node_shape(node, in_shapes)
            )
        if node.bias is not None and node.kind in WEIGHTED_KINDS:
            if node.bias.size != node.output_shape[-1]:
                raise ShapeError(
                    f"node '{node.id}': bias length {node.bias.size} != "
                    f"channel count {node.output_shape[-1]}"
                )
    return model


# ---------------------------------------------------------------------------
# Manifest + blob serialization


def _slice_blob(blob: np.ndarray, ref: dict, node_id: str, what: str) -> np.ndarray:
    offset, length = int(ref["offset"]), int(ref["length"])
    if offset < 0 or length < 0 or offset + length > blob.size:
        raise ModelFormatError(
            f"node '{node_id}': {what} slice [{offset}, {offset + length}) exceeds "
            f"blob of {blob.size} elements (byte offset {offset * 4})"
        )
    values = blob[offset:offset + length]
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise ModelFormatError(
            f"node '{node_id}': non-finite {what} value at element {offset + bad} "
            f"(byte offset {(offset + bad) * 4})"
        )
    return values.copy()


def _node_from_json(obj: dict, blob: np.ndarray) -> LayerNode:
    node = LayerNode(
        id=str(obj["id"]),
        kind=str(obj["kind"]),
        activation=str(obj.get("activation", "none")),
        attrs=dict(obj.get("attrs", {})),
        inputs=[str(x) for x in obj.get("inputs", [])],
    )
    if node.kind == "SubNetwork":
        graph = node.attrs.get("graph")
        if not isinstance(graph, dict):
            raise ModelFormatError(f"node '{node.id}': SubNetwork lacks a nested graph")
        node.attrs["graph"] = ModelGraph(
            name=str(graph.get("name", node.id)),
            nodes=[_node_from_json(inner, blob) for inner in graph.get("nodes", [])],
            outputs=[str(x) for x in graph.get("outputs", [])],
        )
    if "weights" in obj:
        flat = _slice_blob(blob, obj["weights"], node.id, "weight")
        node.weights = _reshape_weights(node, flat)
    if "bias" in obj:
        node.bias = _slice_blob(blob, obj["bias"], node.id, "bias")
    return node


def _reshape_weights(node: LayerNode, flat: np.ndarray) -> np.ndarray:
    if node.kind == "Conv2D":
        kh, kw = node.attrs["kernel_size"]
        filters = int(node.attrs["filters"])
        rest = flat.size // (kh * kw * filters) if kh * kw * filters else 0
        if rest * kh * kw * filters != flat.size or rest == 0:
            raise ModelFormatError(
                f"node '{node.id}': weight length {flat.size} not divisible into "
                f"({kh}, {kw}, cin, {filters})"
            )
        return flat.reshape(kh, kw, rest, filters)
    if node.kind == "Dense":
        units = int(node.attrs["units"])
        if units == 0 or flat.size % units:
            raise ModelFormatError(
                f"node '{node.id}': weight length {flat.size} not divisible by "
                f"units {units}"
            )
        return flat.reshape(flat.size // units, units)
    return flat


def _stats_from_json(nodes: list[dict], percentiles: dict) -> ChannelStats | None:
    entries = {}
    for obj in nodes:
        norm = obj.get("normalization")
        if norm is not None:
            entries[str(obj["id"])] = NodeStats(
                lo=np.asarray(norm["epsilon"], dtype=np.float64),
                hi=np.asarray(norm["lambda"], dtype=np.float64),
            )
    if not entries:
        return None
    return ChannelStats(
        p_lo=float(percentiles.get("p_lo", 0.01)),
        p_hi=float(percentiles.get("p_hi", 99.99)),
        nodes=entries,
    )


def load_model(manifest_path, allow_raw: bool = False) -> ModelGraph:
    """Load and validate a model from its manifest + blob pair."""
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"malformed manifest {manifest_path}: {exc}") from exc
    for key in ("name", "input_shape", "outputs", "nodes"):
        if key not in doc:
            raise ModelFormatError(f"manifest {manifest_path}: missing field '{key}'")

    blob_path = os.path.join(os.path.dirname(os.fspath(manifest_path)), f"{doc['name']}.bin")
    needed = _blob_extent(doc["nodes"])
    if needed and not os.path.exists(blob_path):
        raise ModelFormatError(f"missing weight blob {blob_path}")
    if os.path.exists(blob_path):
        raw = open(blob_path, "rb").read()
        if len(raw) % 4:
            raise ModelFormatError(f"blob length mismatch: {blob_path} is {len(raw)} bytes")
        blob = np.frombuffer(raw, dtype="<f4")
    else:
        blob = np.empty(0, dtype="<f4")
    if needed > blob.size:
        raise ModelFormatError(
            f"blob length mismatch: {blob_path} holds {blob.size} float32 values, "
            f"manifest references {needed}"
        )

    model = ModelGraph(
        name=str(doc["name"]),
        nodes=[_node_from_json(obj, blob) for obj in doc["nodes"]],
        outputs=[str(x) for x in doc["outputs"]],
        input_shape=tuple(int(d) for d in doc["input_shape"]),
        normalization=_stats_from_json(doc["nodes"], doc.get("percentiles", {})),
    )
    validate(model, allow_raw=allow_raw)
    infer_shapes(model)
    return model


def _blob_extent(node_objs: list[dict]) -> int:
    extent = 0

    def visit(objs):
        nonlocal extent
        for obj in objs:
            for key in ("weights", "bias"):
                if key in obj:
                    extent = max(extent, int(obj[key]["offset"]) + int(obj[key]["length"]))
            graph = obj.get("attrs", {}).get("graph")
            if graph:
                visit(graph.get("nodes", []))

    visit(node_objs)
    return extent


def save_model(model: ModelGraph, manifest_path) -> None:
    """Write manifest + blob; round-trips bit-exactly through load_model."""
    blob_parts: list[bytes] = []
    cursor = 0

    def put(values: np.ndarray) -> dict:
        nonlocal cursor
        data = np.ascontiguousarray(values, dtype="<f4")
        blob_parts.append(data.tobytes())
        ref = {"offset": cursor, "length": int(data.size)}
        cursor += int(data.size)
        return ref

    node_objs = []
    for node in model.nodes:
        obj = {
            "id": node.id,
            "kind": node.kind,
            "activation": node.activation,
            "inputs": list(node.inputs),
            "attrs": _jsonable_attrs(node.attrs, put),
        }
        if node.weights is not None:
            obj["weights"] = put(node.weights)
        if node.bias is not None:
            obj["bias"] = put(node.bias)
        if model.normalization is not None and node.id in model.normalization.nodes:
            stats = model.normalization.nodes[node.id]
            obj["normalization"] = {
                "epsilon": [float(v) for v in stats.lo],
                "lambda": [float(v) for v in stats.hi],
            }
        node_objs.append(obj)

    doc = {
        "name": model.name,
        "input_shape": [int(d) for d in (model.input_shape or ())],
        "outputs": list(model.outputs),
        "nodes": node_objs,
    }
    if model.normalization is not None:
        doc["percentiles"] = {
            "p_lo": model.normalization.p_lo,
            "p_hi": model.normalization.p_hi,
        }

    directory = os.path.dirname(os.fspath(manifest_path))
    blob_path = os.path.join(directory, f"{model.name}.bin")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        for part in blob_parts:
            fh.write(part)


def _jsonable_attrs(attrs: dict, put) -> dict:
    out = {}
    for key, value in attrs.items():
        if key == "graph":
            out[key] = _subgraph_to_json(value, put)
        elif isinstance(value, np.ndarray):
            out[key] = [float(v) for v in value.ravel()]
        elif isinstance(value, (list, tuple)):
            out[key] = [
                [float(x) for x in v] if isinstance(v, (list, tuple, np.ndarray)) else v
                for v in value
            ]
        elif isinstance(value, (np.floating, np.integer)):
            out[key] = value.item()
        else:
            out[key] = value
    return out


def _subgraph_to_json(graph, put) -> dict:
    """Nested SubNetwork graphs serialize inline, weights into the parent blob."""
    node_objs = []
    for node in graph.nodes:
        obj = {
            "id": node.id,
            "kind": node.kind,
            "activation": node.activation,
            "inputs": list(node.inputs),
            "attrs": _jsonable_attrs(node.attrs, put),
        }
        if node.weights is not None:
            obj["weights"] = put(node.weights)
        if node.bias is not None:
            obj["bias"] = put(node.bias)
        node_objs.append(obj)
    return {"name": graph.name, "outputs": list(graph.outputs), "nodes": node_objs}
