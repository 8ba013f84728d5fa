"""Stage 1: flatten raw exported models into the core layer vocabulary.

Raw models may contain three extra node kinds on top of the core set:

* ``SubNetwork`` — a nested graph used as a single node. Its inbound edges
  bind positionally to the nested graph's Input nodes; it is spliced into
  the parent with ids namespaced ``<subnet-id>/<inner-id>``.
* ``BatchNorm`` — inference-time statistics ``gamma, beta, mean, variance,
  eps`` carried in attrs, folded into the preceding Conv2D/Dense.
* ``Relu`` — a detached activation, folded into its producer's
  ``activation`` field.

Parsing is idempotent: a graph already in core vocabulary passes through
unchanged (up to dropped unreferenced nodes).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import ParseError
from .ir import (
    CORE_KINDS,
    LayerNode,
    ModelGraph,
    infer_shapes,
    load_model,
    topological_order,
    validate,
)


def load_raw_model(manifest_path) -> ModelGraph:
    """Load a manifest that may use the raw-only kinds."""
    return load_model(manifest_path, allow_raw=True)


def infer_subnetwork_shape(node: LayerNode, in_shapes):
    """Output shape of a SubNetwork node = its nested graph's single output."""
    inner: ModelGraph = node.attrs["graph"]
    ports = [n for n in inner.nodes if n.kind == "Input"]
    if len(ports) != len(in_shapes):
        raise ParseError(
            f"node '{node.id}': {len(in_shapes)} inbound edges for "
            f"{len(ports)} nested input port(s)"
        )
    nodes = inner.node_map()
    for port, shape in zip(ports, in_shapes):
        port.output_shape = tuple(shape)
    for node_id in topological_order(inner):
        n = nodes[node_id]
        if n.kind == "Input":
            continue
        from .ir import _infer_node_shape

        n.output_shape = tuple(
            int(d) for d in _infer_node_shape(n, [nodes[r].output_shape for r in n.inputs])
        )
    return nodes[inner.outputs[0]].output_shape


def _inline_subnetworks(model: ModelGraph) -> ModelGraph:
    while any(n.kind == "SubNetwork" for n in model.nodes):
        out_nodes: list[LayerNode] = []
        redirect: dict[str, str] = {}
        for node in model.nodes:
            if node.kind != "SubNetwork":
                out_nodes.append(node)
                continue
            inner: ModelGraph = node.attrs["graph"]
            ports = [n for n in inner.nodes if n.kind == "Input"]
            rename = {p.id: outer for p, outer in zip(ports, node.inputs)}
            for n in inner.nodes:
                if n.kind != "Input":
                    rename[n.id] = f"{node.id}/{n.id}"
            for n in inner.nodes:
                if n.kind == "Input":
                    continue
                spliced = copy.copy(n)
                spliced.attrs = dict(n.attrs)
                spliced.id = rename[n.id]
                spliced.inputs = [rename[r] for r in n.inputs]
                out_nodes.append(spliced)
            redirect[node.id] = rename[inner.outputs[0]]

        def resolve(ref: str) -> str:
            while ref in redirect:
                ref = redirect[ref]
            return ref

        for n in out_nodes:
            n.inputs = [resolve(r) for r in n.inputs]
        model = ModelGraph(
            name=model.name, nodes=out_nodes,
            outputs=[resolve(o) for o in model.outputs],
            input_shape=model.input_shape,
        )
    return model


def _consumers(model: ModelGraph) -> dict[str, list[LayerNode]]:
    by_id: dict[str, list[LayerNode]] = {n.id: [] for n in model.nodes}
    for node in model.nodes:
        for ref in node.inputs:
            by_id[ref].append(node)
    return by_id


def _fuse_batchnorm(model: ModelGraph) -> ModelGraph:
    nodes = model.node_map()
    fused: dict[str, str] = {}
    keep: list[LayerNode] = []
    for node in model.nodes:
        if node.kind != "BatchNorm":
            keep.append(node)
            continue
        producer = nodes[node.inputs[0]]
        if producer.kind not in ("Conv2D", "Dense") or producer.activation != "none":
            raise ParseError(
                f"node '{node.id}': BatchNorm without a fusable producer "
                f"(got {producer.kind}/{producer.activation})"
            )
        a = node.attrs
        gamma = np.asarray(a["gamma"], dtype=np.float64)
        beta = np.asarray(a["beta"], dtype=np.float64)
        mean = np.asarray(a["mean"], dtype=np.float64)
        var = np.asarray(a["variance"], dtype=np.float64)
        scale = gamma / np.sqrt(var + float(a.get("eps", 1e-3)))
        producer.weights = (
            producer.weights.astype(np.float64) * scale
        ).astype(np.float32)
        bias = producer.bias.astype(np.float64) if producer.bias is not None else 0.0
        producer.bias = ((bias - mean) * scale + beta).astype(np.float32)
        fused[node.id] = producer.id
    return _rewire(model, keep, fused)


def _fuse_relu(model: ModelGraph) -> ModelGraph:
    nodes = model.node_map()
    consumers = _consumers(model)
    fused: dict[str, str] = {}
    keep: list[LayerNode] = []
    for node in model.nodes:
        if node.kind != "Relu":
            keep.append(node)
            continue
        producer = nodes[node.inputs[0]]
        others = [c for c in consumers[producer.id] if c is not node]
        direct_output = producer.id in model.outputs
        if producer.kind == "Input" or others or direct_output:
            raise ParseError(
                f"node '{node.id}': standalone relu cannot be fused into "
                f"'{producer.id}' (producer is shared or an input)"
            )
        if producer.activation == "relu":
            # relu(relu(x)) == relu(x); collapse onto the producer.
            fused[node.id] = producer.id
            continue
        producer.activation = "relu"
        fused[node.id] = producer.id
    return _rewire(model, keep, fused)


def _rewire(model: ModelGraph, keep: list[LayerNode], fused: dict[str, str]) -> ModelGraph:
    def resolve(ref: str) -> str:
        while ref in fused:
            ref = fused[ref]
        return ref

    for node in keep:
        node.inputs = [resolve(r) for r in node.inputs]
    return ModelGraph(
        name=model.name, nodes=keep,
        outputs=[resolve(o) for o in model.outputs],
        input_shape=model.input_shape,
    )


def _drop_unreferenced(model: ModelGraph) -> ModelGraph:
    live: set[str] = set(model.outputs)
    nodes = model.node_map()
    stack = list(model.outputs)
    while stack:
        node = nodes[stack.pop()]
        for ref in node.inputs:
            if ref not in live:
                live.add(ref)
                stack.append(ref)
    model.nodes = [n for n in model.nodes if n.id in live or n.kind == "Input"]
    return model


def parse(raw: ModelGraph) -> ModelGraph:
    """Flatten a raw model into the core vocabulary.

    Sub-networks are inlined, BatchNorm folded into the preceding weighted
    layer, detached relu nodes folded into their producer, and unreferenced
    nodes dropped. The result evaluates identically to the input.
    """
    model = _copy_graph(raw)
    validate(model, allow_raw=True)
    model = _inline_subnetworks(model)
    model = _fuse_batchnorm(model)
    model = _fuse_relu(model)
    model = _drop_unreferenced(model)
    for node in model.nodes:
        if node.kind not in CORE_KINDS:
            raise ParseError(f"node '{node.id}': kind '{node.kind}' not supported")
    validate(model)
    if model.input_shape is not None:
        infer_shapes(model)
    return model


def _copy_graph(model: ModelGraph) -> ModelGraph:
    nodes = []
    for n in model.nodes:
        c = copy.copy(n)
        c.attrs = dict(n.attrs)
        c.inputs = list(n.inputs)
        if n.kind == "SubNetwork":
            c.attrs["graph"] = _copy_graph(n.attrs["graph"])
        nodes.append(c)
    return ModelGraph(
        name=model.name, nodes=nodes, outputs=list(model.outputs),
        input_shape=model.input_shape, normalization=model.normalization,
    )


@dataclass
class ParseReport:
    """Output agreement between a raw model and its parsed form."""

    max_deviation: float
    tolerance: float
    per_output: dict[str, float]

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance


def verify_parse(raw: ModelGraph, parsed: ModelGraph, probe_batch: np.ndarray,
                 tolerance: float = 1e-4) -> ParseReport:
    """Compare raw and parsed outputs on a probe batch."""
    raw_out = engine.forward_outputs(raw, probe_batch)
    new_out = engine.forward_outputs(parsed, probe_batch)
    if len(raw_out) != len(new_out):
        raise ParseError("raw and parsed models disagree on output count")
    per_output = {}
    for name, a, b in zip(parsed.outputs, raw_out, new_out):
        if a.shape != b.shape:
            raise ParseError(
                f"output '{name}': shape {a.shape} vs {b.shape} after parsing"
            )
        per_output[name] = engine.max_relative_deviation(a, b)
    worst = max(per_output.values()) if per_output else 0.0
    return ParseReport(max_deviation=worst, tolerance=tolerance, per_output=per_output)


def count_nodes(model: ModelGraph) -> int:
    """Nodes including those inside nested sub-networks."""
    total = 0
    for node in model.nodes:
        total += 1
        if node.kind == "SubNetwork":
            total += count_nodes(node.attrs["graph"])
    return total
