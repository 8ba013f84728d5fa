"""Rate-coded spiking network conversion toolkit.

Takes a trained convolutional network, rewrites its weights so every
channel's activations target the unit interval, mirrors it with
integrate-and-fire neurons, and simulates it under constant-current input.
Ships with an analog reference engine, fidelity analysis (correlation and
detection mAP), deterministic fixtures, and a CLI.
"""

from .analysis import CorrelationReport, correlate, denormalize
from .calibration import (
    ChannelStats,
    collect_stats,
    normalize_model,
    synthesize_normadd,
    verify_normalization,
)
from .detection import (
    AnchorConfig,
    AnchorLevel,
    BoxAnnotation,
    Detection,
    DetectionDataset,
    decode_detections,
    evaluate_map,
    iou,
    map_convergence,
)
from .engine import forward, forward_outputs
from .ir import (
    LayerNode,
    ModelGraph,
    NodeStats,
    infer_shapes,
    load_model,
    save_model,
    topological_order,
)
from .parsing import load_raw_model, parse, verify_parse
from .snn import RateRecord, SimConfig, SpikingNetwork, build_snn, run

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig", "AnchorLevel", "BoxAnnotation", "ChannelStats",
    "CorrelationReport", "Detection", "DetectionDataset", "LayerNode",
    "ModelGraph", "NodeStats", "RateRecord", "SimConfig", "SpikingNetwork",
    "build_snn", "collect_stats", "correlate", "decode_detections",
    "denormalize", "evaluate_map", "forward", "forward_outputs",
    "infer_shapes", "iou", "load_model", "load_raw_model", "map_convergence",
    "normalize_model", "parse", "run", "save_model", "synthesize_normadd",
    "topological_order", "verify_normalization", "verify_parse",
]
