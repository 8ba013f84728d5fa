"""Deterministic desk-scale fixture models and datasets.

Three kinds, all seeded and byte-reproducible:

* ``toy-classifier`` — random-weight 4-conv relu net with one pooling
  stage, plus a calibration batch of smoothed-noise images.
* ``mini-fpn-detector`` — random-weight backbone with a top-down pathway
  (downsampling convs, lateral 1x1s, nearest upsample, elementwise Add)
  and linear class/box heads. The Add exercises NormAdd conversion; the
  linear heads exercise the negative-activation shift.
* ``blob-detector`` — handcrafted weights that detect bright 5x5 squares
  on a dark noisy background: a box matched filter feeds a thresholded
  1x1 class head, and an all-zero box head pins predicted boxes to the
  anchors, which align exactly with blob extents. Ships with a synthetic
  annotated dataset.

Networks stay small (<= 8 weighted layers, <= 16 channels, 32x32 inputs)
so the full verification suite runs in minutes on a laptop.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import engine
from .detection import AnchorConfig, AnchorLevel, BoxAnnotation, DetectionDataset, save_dataset
from .errors import ToolError
from .ir import LayerNode, ModelGraph, infer_shapes, save_model
from .tensorio import write_tensor

FIXTURE_KINDS = ("toy-classifier", "mini-fpn-detector", "blob-detector")

BLOB_SIZE = 5
BLOB_MARGIN = 2
BLOB_MIN_SEPARATION = 10


@dataclass
class FixtureSpec:
    kind: str
    seed: int = 0
    count: int = 0          # calibration batch or dataset size; 0 = kind default
    image_size: int = 32

    def __post_init__(self) -> None:
        if self.kind not in FIXTURE_KINDS:
            raise ToolError(f"unknown fixture kind '{self.kind}'")
        if self.count == 0:
            self.count = 50 if self.kind == "blob-detector" else 128


def smooth_images(rng: np.random.Generator, count: int, size: int) -> np.ndarray:
    """Spatially correlated noise images in [0, 1]."""
    images = rng.random((count, size, size, 1)).astype(np.float32)
    kernel = np.full((3, 3, 1, 1), 1.0 / 9.0, dtype=np.float32)
    for _ in range(2):
        images = engine.conv2d(images, kernel, None, 1, "same")
    return np.clip((images - 0.5) * 3.0 + 0.5, 0.0, 1.0)


def _conv(rng, node_id, inputs, cin, filters, kernel=3, stride=1,
          padding="same", activation="relu", bias_range=(0.0, 0.3)) -> LayerNode:
    fan_in = kernel * kernel * cin
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), (kernel, kernel, cin, filters))
    bias = rng.uniform(*bias_range, filters)
    return LayerNode(
        id=node_id, kind="Conv2D", activation=activation,
        weights=weights.astype(np.float32), bias=bias.astype(np.float32),
        attrs={"kernel_size": [kernel, kernel], "filters": filters,
               "stride": stride, "padding": padding},
        inputs=list(inputs),
    )


def gen_toy_classifier(seed: int = 0, count: int = 128,
                       image_size: int = 32) -> tuple[ModelGraph, np.ndarray]:
    rng = np.random.default_rng(seed)
    nodes = [
        LayerNode(id="input", kind="Input"),
        _conv(rng, "c1", ["input"], 1, 8),
        LayerNode(id="p1", kind="AvgPool2D", attrs={"pool": 2}, inputs=["c1"]),
        _conv(rng, "c2", ["p1"], 8, 12),
        _conv(rng, "c3", ["c2"], 12, 16, padding="valid"),
        _conv(rng, "c4", ["c3"], 16, 10, kernel=1),
    ]
    model = ModelGraph(
        name="toy-classifier", nodes=nodes, outputs=["c4"],
        input_shape=(image_size, image_size, 1),
    )
    infer_shapes(model)
    calib = smooth_images(rng, count, image_size)
    return model, calib


def gen_mini_fpn(seed: int = 0, count: int = 128,
                 image_size: int = 32) -> tuple[ModelGraph, np.ndarray, np.ndarray]:
    """Backbone + top-down merge + linear detection heads, random weights."""
    rng = np.random.default_rng(seed)
    nodes = [
        LayerNode(id="input", kind="Input"),
        _conv(rng, "c1", ["input"], 1, 8),
        _conv(rng, "d2", ["c1"], 8, 12, stride=2),
        _conv(rng, "d3", ["d2"], 12, 16, stride=2),
        _conv(rng, "lat2", ["d2"], 12, 8, kernel=1, activation="none",
              bias_range=(-0.2, 0.2)),
        _conv(rng, "top3", ["d3"], 16, 8, kernel=1, activation="none",
              bias_range=(-0.2, 0.2)),
        LayerNode(id="up3", kind="UpsampleNearest", attrs={"factor": 2}, inputs=["top3"]),
        LayerNode(id="merge2", kind="Add", inputs=["lat2", "up3"]),
        # 1x1 so the shift carried by the merge stays exact under padding
        _conv(rng, "smooth2", ["merge2"], 8, 8, kernel=1),
        _conv(rng, "cls2", ["smooth2"], 8, 2, activation="none",
              bias_range=(-0.3, 0.3)),
        _conv(rng, "box2", ["smooth2"], 8, 4, activation="none",
              bias_range=(-0.3, 0.3)),
    ]
    model = ModelGraph(
        name="mini-fpn-detector", nodes=nodes, outputs=["cls2", "box2"],
        input_shape=(image_size, image_size, 1),
    )
    infer_shapes(model)
    calib = smooth_images(rng, count, image_size)
    probe = smooth_images(rng, 1, image_size)
    return model, calib, probe


# ---------------------------------------------------------------------------
# Blob detector (handcrafted)

CLS_GAIN = 50.0
CLS_THRESHOLD = 0.82


def _blob_feature_kernels() -> np.ndarray:
    k = BLOB_SIZE
    kernels = np.zeros((k, k, 1, 4), dtype=np.float32)
    kernels[:, :, 0, 0] = 1.0 / (k * k)          # box matched filter
    kernels[k // 2, k // 2, 0, 1] = 1.0          # center tap
    kernels[:, :, 0, 2] = np.linspace(-1, 1, k)[None, :] / k   # horizontal edge
    kernels[:, :, 0, 3] = np.linspace(-1, 1, k)[:, None] / k   # vertical edge
    return kernels


def gen_blob_model(image_size: int = 32) -> tuple[ModelGraph, AnchorConfig]:
    cls_w = np.zeros((1, 1, 4, 1), dtype=np.float32)
    cls_w[0, 0, 0, 0] = CLS_GAIN
    nodes = [
        LayerNode(id="input", kind="Input"),
        LayerNode(
            id="feat", kind="Conv2D", activation="relu",
            weights=_blob_feature_kernels(), bias=np.zeros(4, dtype=np.float32),
            attrs={"kernel_size": [BLOB_SIZE, BLOB_SIZE], "filters": 4,
                   "stride": 1, "padding": "same"},
            inputs=["input"],
        ),
        LayerNode(
            id="cls", kind="Conv2D", activation="none",
            weights=cls_w,
            bias=np.array([-CLS_GAIN * CLS_THRESHOLD], dtype=np.float32),
            attrs={"kernel_size": [1, 1], "filters": 1, "stride": 1, "padding": "same"},
            inputs=["feat"],
        ),
        LayerNode(
            id="box", kind="Conv2D", activation="none",
            weights=np.zeros((1, 1, 4, 4), dtype=np.float32),
            bias=np.zeros(4, dtype=np.float32),
            attrs={"kernel_size": [1, 1], "filters": 4, "stride": 1, "padding": "same"},
            inputs=["feat"],
        ),
    ]
    model = ModelGraph(
        name="blob-detector", nodes=nodes, outputs=["cls", "box"],
        input_shape=(image_size, image_size, 1),
    )
    infer_shapes(model)
    anchors = AnchorConfig(
        levels=[AnchorLevel(stride=1, sizes=[float(BLOB_SIZE)], ratios=[1.0])],
        score_threshold=0.5, nms_iou=0.5,
    )
    return model, anchors


def gen_blob_images(rng: np.random.Generator, count: int,
                    image_size: int = 32) -> DetectionDataset:
    """Bright 5x5 squares on dark noise, 1-3 per image, well separated."""
    images, annotations = [], []
    low = BLOB_MARGIN
    high = image_size - BLOB_SIZE - BLOB_MARGIN
    for _ in range(count):
        img = rng.uniform(0.05, 0.11, (image_size, image_size, 1)).astype(np.float32)
        n_blobs = int(rng.integers(1, 4))
        centers: list[tuple[int, int]] = []
        boxes: list[BoxAnnotation] = []
        attempts = 0
        while len(boxes) < n_blobs and attempts < 200:
            attempts += 1
            x0 = int(rng.integers(low, high + 1))
            y0 = int(rng.integers(low, high + 1))
            cx, cy = x0 + BLOB_SIZE / 2, y0 + BLOB_SIZE / 2
            if any(abs(cx - ox) + abs(cy - oy) < BLOB_MIN_SEPARATION
                   for ox, oy in centers):
                continue
            value = float(rng.uniform(0.86, 0.96))
            img[y0:y0 + BLOB_SIZE, x0:x0 + BLOB_SIZE, 0] = value
            centers.append((cx, cy))
            boxes.append(BoxAnnotation(
                box=(float(x0), float(y0), float(x0 + BLOB_SIZE), float(y0 + BLOB_SIZE)),
                class_id=0,
            ))
        images.append(img)
        annotations.append(boxes)
    return DetectionDataset(images=images, annotations=annotations)


def gen_blob_detector(seed: int = 0, count: int = 50, image_size: int = 32):
    """Model, calibration batch, annotated dataset, and anchor config."""
    rng = np.random.default_rng(seed)
    model, anchors = gen_blob_model(image_size)
    calib_set = gen_blob_images(rng, 64, image_size)
    calib = np.stack(calib_set.images)
    dataset = gen_blob_images(rng, count, image_size)
    return model, calib, dataset, anchors


# ---------------------------------------------------------------------------
# CLI materialization


def write_fixture(spec: FixtureSpec, out_dir) -> dict:
    """Write a fixture to disk; returns a small description of what landed."""
    os.makedirs(out_dir, exist_ok=True)
    info: dict = {"kind": spec.kind, "seed": spec.seed, "count": spec.count}
    if spec.kind == "toy-classifier":
        model, calib = gen_toy_classifier(spec.seed, spec.count, spec.image_size)
        save_model(model, os.path.join(out_dir, "model.json"))
        write_tensor(os.path.join(out_dir, "calib.tns"), calib)
        info["files"] = ["model.json", f"{model.name}.bin", "calib.tns"]
    elif spec.kind == "mini-fpn-detector":
        model, calib, probe = gen_mini_fpn(spec.seed, spec.count, spec.image_size)
        save_model(model, os.path.join(out_dir, "model.json"))
        write_tensor(os.path.join(out_dir, "calib.tns"), calib)
        write_tensor(os.path.join(out_dir, "probe.tns"), probe)
        info["files"] = ["model.json", f"{model.name}.bin", "calib.tns", "probe.tns"]
    else:
        model, calib, dataset, anchors = gen_blob_detector(
            spec.seed, spec.count, spec.image_size
        )
        save_model(model, os.path.join(out_dir, "model.json"))
        write_tensor(os.path.join(out_dir, "calib.tns"), calib)
        anchors.to_json(os.path.join(out_dir, "anchors.json"))
        save_dataset(dataset, os.path.join(out_dir, "dataset"))
        info["files"] = ["model.json", f"{model.name}.bin", "calib.tns",
                         "anchors.json", "dataset/"]
    return info
