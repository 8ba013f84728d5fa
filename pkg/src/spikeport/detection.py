"""Object detection decode and evaluation.

Detector models expose pairs of output heads per pyramid level: class
logits with A*K channels and box deltas with A*4 channels, where A is the
number of anchors per grid cell and K the number of classes. Logits are
squashed host-side (never inside the spiking network), boxes decoded with
the usual center/size parameterization against a regular anchor grid,
thresholded, and deduplicated by per-class greedy non-maximum suppression.

Evaluation is mAP at a fixed IoU threshold: per class, detections pooled
over images and sorted by score, greedily matched against unmatched ground
truth, precision-recall curve integrated under its upper envelope
(all-point interpolation). Classes without ground truth are excluded from
the mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import analysis, engine, snn as snn_mod
from .errors import ToolError
from .ir import ModelGraph
from .snn import SimConfig, SpikingNetwork
from .tensorio import read_tensor, write_tensor


@dataclass
class Detection:
    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max (pixels)
    class_id: int
    score: float


@dataclass
class BoxAnnotation:
    box: tuple[float, float, float, float]
    class_id: int


@dataclass
class AnchorLevel:
    stride: int
    sizes: list[float]
    ratios: list[float]

    @property
    def anchors_per_cell(self) -> int:
        return len(self.sizes) * len(self.ratios)


@dataclass
class AnchorConfig:
    levels: list[AnchorLevel]
    score_threshold: float = 0.5
    nms_iou: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.score_threshold < 1 or not 0 < self.nms_iou < 1:
            raise ToolError("anchor thresholds must lie in (0, 1)")
        for level in self.levels:
            if level.anchors_per_cell < 1:
                raise ToolError("each head needs at least one anchor")

    @classmethod
    def from_json(cls, path) -> "AnchorConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(
            levels=[AnchorLevel(int(l["stride"]), list(l["sizes"]), list(l["ratios"]))
                    for l in doc["levels"]],
            score_threshold=float(doc.get("score_threshold", 0.5)),
            nms_iou=float(doc.get("nms_iou", 0.5)),
        )

    def to_json(self, path) -> None:
        doc = {
            "score_threshold": self.score_threshold,
            "nms_iou": self.nms_iou,
            "levels": [
                {"stride": l.stride, "sizes": l.sizes, "ratios": l.ratios}
                for l in self.levels
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def iou(a, b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _level_anchors(level: AnchorLevel, grid_h: int, grid_w: int) -> np.ndarray:
    """Anchor boxes (grid_h, grid_w, A, 4) centered on the stride grid."""
    cy = (np.arange(grid_h) + 0.5) * level.stride
    cx = (np.arange(grid_w) + 0.5) * level.stride
    shapes = []
    for size in level.sizes:
        for ratio in level.ratios:
            w = size * np.sqrt(ratio)
            h = size / np.sqrt(ratio)
            shapes.append((w, h))
    anchors = np.zeros((grid_h, grid_w, len(shapes), 4), dtype=np.float64)
    for a, (w, h) in enumerate(shapes):
        anchors[:, :, a, 0] = cx[None, :] - w / 2
        anchors[:, :, a, 1] = cy[:, None] - h / 2
        anchors[:, :, a, 2] = cx[None, :] + w / 2
        anchors[:, :, a, 3] = cy[:, None] + h / 2
    return anchors


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_detections(head_outputs, anchors: AnchorConfig, image_size) -> list[Detection]:
    """Decode (class-logit, box-delta) tensor pairs into detections.

    ``head_outputs`` is a flat list [cls_0, box_0, cls_1, box_1, ...], one
    pair per configured level. Channel layout per cell is anchor-major:
    cls[..., a*K + k], box[..., a*4 + d] with deltas (dx, dy, dw, dh)
    relative to anchor center and size. Results are deterministic: sorted
    by descending score, ties by spatial index.
    """
    if len(head_outputs) != 2 * len(anchors.levels):
        raise ToolError(
            f"{len(head_outputs)} head tensors for {len(anchors.levels)} anchor "
            "level(s); expected one (logits, deltas) pair per level"
        )
    width, height = image_size
    candidates: list[tuple[float, int, Detection]] = []
    spatial_index = 0
    for level_idx, level in enumerate(anchors.levels):
        logits = np.asarray(head_outputs[2 * level_idx], dtype=np.float64)
        deltas = np.asarray(head_outputs[2 * level_idx + 1], dtype=np.float64)
        grid_h, grid_w = logits.shape[0], logits.shape[1]
        a_per_cell = level.anchors_per_cell
        classes = logits.shape[2] // a_per_cell
        if classes * a_per_cell != logits.shape[2] or deltas.shape[2] != a_per_cell * 4:
            raise ToolError(
                f"level {level_idx}: head channels {logits.shape[2]}/{deltas.shape[2]} "
                f"do not match {a_per_cell} anchor(s) per cell"
            )
        boxes = _level_anchors(level, grid_h, grid_w)
        scores = _sigmoid(logits).reshape(grid_h, grid_w, a_per_cell, classes)
        deltas = deltas.reshape(grid_h, grid_w, a_per_cell, 4)
        aw = boxes[..., 2] - boxes[..., 0]
        ah = boxes[..., 3] - boxes[..., 1]
        acx = (boxes[..., 0] + boxes[..., 2]) / 2
        acy = (boxes[..., 1] + boxes[..., 3]) / 2
        cx = acx + deltas[..., 0] * aw
        cy = acy + deltas[..., 1] * ah
        w = aw * np.exp(deltas[..., 2])
        h = ah * np.exp(deltas[..., 3])
        x0 = np.clip(cx - w / 2, 0, width)
        y0 = np.clip(cy - h / 2, 0, height)
        x1 = np.clip(cx + w / 2, 0, width)
        y1 = np.clip(cy + h / 2, 0, height)
        keep = np.argwhere(scores >= anchors.score_threshold)
        for gy, gx, a, k in keep:
            if x1[gy, gx, a] <= x0[gy, gx, a] or y1[gy, gx, a] <= y0[gy, gx, a]:
                continue
            det = Detection(
                box=(float(x0[gy, gx, a]), float(y0[gy, gx, a]),
                     float(x1[gy, gx, a]), float(y1[gy, gx, a])),
                class_id=int(k),
                score=float(scores[gy, gx, a, k]),
            )
            order_key = spatial_index + int((gy * grid_w + gx) * a_per_cell + a)
            candidates.append((det.score, order_key, det))
        spatial_index += grid_h * grid_w * a_per_cell
    candidates.sort(key=lambda item: (-item[0], item[1]))
    return _nms([det for _, _, det in candidates], anchors.nms_iou)


def _nms(sorted_dets: list[Detection], threshold: float) -> list[Detection]:
    """Greedy per-class suppression; input must be sorted by descending score."""
    kept: list[Detection] = []
    for det in sorted_dets:
        if any(k.class_id == det.class_id and iou(k.box, det.box) >= threshold
               for k in kept):
            continue
        kept.append(det)
    return kept


# ---------------------------------------------------------------------------
# mAP


@dataclass
class MapReport:
    per_class_ap: dict[int, float]
    mean_ap: float | None  # None when no class has ground truth

    def summary(self) -> str:
        if self.mean_ap is None:
            return "mAP undefined: no ground-truth instances"
        parts = [f"class {c}: AP {ap:.4f}" for c, ap in sorted(self.per_class_ap.items())]
        parts.append(f"mAP {self.mean_ap:.4f}")
        return ", ".join(parts)


def _average_precision(matches: list[tuple[float, bool]], n_gt: int) -> float:
    """AP from (score, is_tp) pairs via the precision envelope."""
    if n_gt == 0:
        return 0.0
    if not matches:
        return 0.0
    matches = sorted(matches, key=lambda m: -m[0])
    tp = np.cumsum([1.0 if m[1] else 0.0 for m in matches])
    fp = np.cumsum([0.0 if m[1] else 1.0 for m in matches])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # envelope: precision at recall r is the max precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate_map(predictions: list[list[Detection]],
                 ground_truth: list[list[BoxAnnotation]],
                 iou_threshold: float = 0.5) -> MapReport:
    """mAP over classes with >= 1 ground-truth instance.

    Per class, detections from all images are pooled and sorted by score;
    each is greedily matched to the not-yet-matched ground-truth box of the
    same image with the highest IoU >= threshold.
    """
    if len(predictions) != len(ground_truth):
        raise ToolError(
            f"{len(predictions)} prediction lists vs {len(ground_truth)} annotation lists"
        )
    classes: set[int] = set()
    for annotations in ground_truth:
        classes.update(ann.class_id for ann in annotations)

    per_class: dict[int, float] = {}
    for cls in sorted(classes):
        n_gt = sum(1 for anns in ground_truth for a in anns if a.class_id == cls)
        pooled = [
            (det.score, img_idx, det)
            for img_idx, dets in enumerate(predictions)
            for det in dets
            if det.class_id == cls
        ]
        pooled.sort(key=lambda item: (-item[0], item[1]))
        matched: dict[int, set[int]] = {i: set() for i in range(len(ground_truth))}
        outcomes: list[tuple[float, bool]] = []
        for score, img_idx, det in pooled:
            anns = ground_truth[img_idx]
            best, best_iou = None, 0.0
            for gt_idx, ann in enumerate(anns):
                if ann.class_id != cls or gt_idx in matched[img_idx]:
                    continue
                value = iou(det.box, ann.box)
                if value >= iou_threshold and value > best_iou:
                    best, best_iou = gt_idx, value
            if best is not None:
                matched[img_idx].add(best)
                outcomes.append((score, True))
            else:
                outcomes.append((score, False))
        per_class[cls] = _average_precision(outcomes, n_gt)

    if not per_class:
        return MapReport(per_class_ap={}, mean_ap=None)
    return MapReport(
        per_class_ap=per_class,
        mean_ap=float(np.mean(list(per_class.values()))),
    )


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DetectionDataset:
    images: list[np.ndarray]
    annotations: list[list[BoxAnnotation]]

    def __post_init__(self) -> None:
        if len(self.images) != len(self.annotations):
            raise ToolError("image/annotation count mismatch")

    def __len__(self) -> int:
        return len(self.images)


def save_dataset(dataset: DetectionDataset, directory) -> None:
    import os

    os.makedirs(directory, exist_ok=True)
    entries = []
    for idx, (image, anns) in enumerate(zip(dataset.images, dataset.annotations)):
        filename = f"img_{idx:04d}.tns"
        write_tensor(os.path.join(directory, filename), image)
        entries.append({
            "file": filename,
            "boxes": [
                {"class": a.class_id,
                 "x_min": a.box[0], "y_min": a.box[1],
                 "x_max": a.box[2], "y_max": a.box[3]}
                for a in anns
            ],
        })
    with open(os.path.join(directory, "annotations.json"), "w", encoding="utf-8") as fh:
        json.dump({"images": entries}, fh, indent=2)
        fh.write("\n")


def load_dataset(directory) -> DetectionDataset:
    import os

    with open(os.path.join(directory, "annotations.json"), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    images, annotations = [], []
    for entry in doc["images"]:
        images.append(read_tensor(os.path.join(directory, entry["file"])))
        annotations.append([
            BoxAnnotation(
                box=(float(b["x_min"]), float(b["y_min"]),
                     float(b["x_max"]), float(b["y_max"])),
                class_id=int(b["class"]),
            )
            for b in entry["boxes"]
        ])
    return DetectionDataset(images=images, annotations=annotations)


# ---------------------------------------------------------------------------
# End-to-end evaluation


def analog_detections(model: ModelGraph, image: np.ndarray,
                      anchors: AnchorConfig) -> list[Detection]:
    """Reference detections from the analog model for one image.

    A normalized model's outputs are mapped back to original magnitudes
    before decoding.
    """
    heads = engine.forward_outputs(model, image[None, ...])
    tensors = {out: h[0] for out, h in zip(model.outputs, heads)}
    if model.is_normalized():
        tensors = analysis.denormalize(tensors, model.normalization)
    size = (model.input_shape[1], model.input_shape[0])
    return decode_detections([tensors[out] for out in model.outputs], anchors, size)


def snn_detections(rates: dict[str, np.ndarray], model: ModelGraph,
                   anchors: AnchorConfig) -> list[Detection]:
    """Detections decoded from denormalized firing rates."""
    decoded = analysis.denormalize(rates, model.normalization)
    heads = [decoded[out] for out in model.outputs]
    size = (model.input_shape[1], model.input_shape[0])
    return decode_detections(heads, anchors, size)


@dataclass
class MapSeries:
    times_ms: list[float]
    mean_ap: list[float | None]
    per_class: list[dict[int, float]]
    analog_report: MapReport


def map_convergence(network: SpikingNetwork, dataset: DetectionDataset,
                    config: SimConfig, sample_every_ms: float,
                    anchors: AnchorConfig,
                    analog_model: ModelGraph | None = None) -> MapSeries:
    """mAP sampled along the simulation, plus the analog reference score.

    Each image is simulated once; running rates are snapshotted every
    ``sample_every_ms`` and decoded into detections at each snapshot. The
    reference comes from ``analog_model`` when given, otherwise from the
    network's own model via denormalization.
    """
    if len(dataset) == 0:
        raise ToolError("empty dataset")
    sample_steps = max(1, int(round(sample_every_ms / config.dt)))
    model = network.model
    per_time: dict[float, list[list[Detection]]] = {}
    for image in dataset.images:
        record = snn_mod.run(
            network, image, config,
            record=set(model.outputs), snapshot_every=sample_steps,
        )
        times = [t for t, _ in record.series[model.outputs[0]]]
        for idx, t in enumerate(times):
            rates = {out: record.series[out][idx][1] for out in model.outputs}
            per_time.setdefault(t, []).append(snn_detections(rates, model, anchors))

    reference = analog_model if analog_model is not None else model
    analog_preds = [analog_detections(reference, img, anchors) for img in dataset.images]
    analog_report = evaluate_map(analog_preds, dataset.annotations)

    times_sorted = sorted(per_time)
    mean_ap, per_class = [], []
    for t in times_sorted:
        report = evaluate_map(per_time[t], dataset.annotations)
        mean_ap.append(report.mean_ap)
        per_class.append(report.per_class_ap)
    return MapSeries(
        times_ms=times_sorted, mean_ap=mean_ap, per_class=per_class,
        analog_report=analog_report,
    )


def write_map_csv(series: MapSeries, path) -> None:
    """CSV rows (time_ms, class, AP, mAP); time -1 holds the analog reference."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time_ms,class,ap,map\n")
        ref = series.analog_report
        ref_map = "" if ref.mean_ap is None else f"{ref.mean_ap:.6f}"
        for cls, ap in sorted(ref.per_class_ap.items()):
            fh.write(f"-1,{cls},{ap:.6f},{ref_map}\n")
        for t, aps, mean in zip(series.times_ms, series.per_class, series.mean_ap):
            mean_str = "" if mean is None else f"{mean:.6f}"
            for cls, ap in sorted(aps.items()):
                fh.write(f"{t:g},{cls},{ap:.6f},{mean_str}\n")
