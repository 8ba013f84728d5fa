"""Independent reference implementations used to freeze expected values.

Everything here is deliberately slow and dumb: plain Python loops, no
shared code with the package beyond the public data types. These are the
second route for every dual-route check in the suite.
"""

from __future__ import annotations

import math

import numpy as np

from spikeport.detection import BoxAnnotation, Detection


def conv2d_reference(x, kernel, bias, stride, padding):
    """Six-nested-loop cross-correlation, float64 accumulation."""
    b, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    if padding == "same":
        oh, ow = math.ceil(h / stride), math.ceil(w / stride)
        pad_h = max((oh - 1) * stride + kh - h, 0)
        pad_w = max((ow - 1) * stride + kw - w, 0)
        top, left = pad_h // 2, pad_w // 2
    else:
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        top = left = 0
    out = np.zeros((b, oh, ow, cout), dtype=np.float64)
    for n in range(b):
        for oy in range(oh):
            for ox in range(ow):
                for co in range(cout):
                    acc = float(bias[co]) if bias is not None else 0.0
                    for i in range(kh):
                        for j in range(kw):
                            yy = oy * stride + i - top
                            xx = ox * stride + j - left
                            if 0 <= yy < h and 0 <= xx < w:
                                for ci in range(cin):
                                    acc += float(x[n, yy, xx, ci]) * float(kernel[i, j, ci, co])
                    out[n, oy, ox, co] = acc
    return out


def if_neuron_reference(current: float, steps: int, v_th: float = 1.0,
                        transient_steps: int = 0):
    """Unrolled membrane recursion for one neuron under constant current.

    Returns (post-transient spike count, final potential). Reset by
    subtraction lands on the step after the spike.
    """
    v = 0.0
    prev = 0
    count = 0
    for step in range(1, steps + 1):
        v = v + current - v_th * prev
        prev = 1 if v >= v_th else 0
        if prev and step > transient_steps:
            count += 1
    return count, v


def iou_reference(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def map_reference(predictions, ground_truth, iou_threshold=0.5):
    """mAP by exhaustive prefix scanning.

    Matching follows the published rule (score order, best unmatched
    overlap); the average precision is then computed by enumerating, for
    every achievable recall level, the best precision over all detection
    prefixes that reach it - no envelope shortcut.
    """
    classes = sorted({a.class_id for anns in ground_truth for a in anns})
    if not classes:
        return None, {}
    aps = {}
    for cls in classes:
        n_gt = sum(1 for anns in ground_truth for a in anns if a.class_id == cls)
        dets = []
        for img_idx, dlist in enumerate(predictions):
            for d in dlist:
                if d.class_id == cls:
                    dets.append((d.score, img_idx, d))
        dets.sort(key=lambda t: (-t[0], t[1]))
        taken: set[tuple[int, int]] = set()
        flags = []
        for score, img_idx, det in dets:
            best_j, best_v = None, 0.0
            for j, g in enumerate(ground_truth[img_idx]):
                if g.class_id != cls or (img_idx, j) in taken:
                    continue
                v = iou_reference(det.box, g.box)
                if v >= iou_threshold and v > best_v:
                    best_j, best_v = j, v
            if best_j is not None:
                taken.add((img_idx, best_j))
                flags.append(True)
            else:
                flags.append(False)
        # precision/recall at every prefix
        prefix = []
        tp = 0
        for k, flag in enumerate(flags, start=1):
            tp += 1 if flag else 0
            prefix.append((tp / n_gt, tp / k))
        ap = 0.0
        for level in range(1, n_gt + 1):
            r = level / n_gt
            best_p = max((p for rec, p in prefix if rec >= r), default=0.0)
            ap += best_p / n_gt
        aps[cls] = ap
    return sum(aps.values()) / len(aps), aps


def random_detection_instance(rng: np.random.Generator):
    """Small random mAP instance: <=2 images, <=3 dets and <=2 GT per class."""
    n_images = int(rng.integers(1, 3))
    n_classes = int(rng.integers(1, 3))

    def random_box():
        x0 = float(rng.integers(0, 8))
        y0 = float(rng.integers(0, 8))
        return (x0, y0, x0 + float(rng.integers(2, 6)), y0 + float(rng.integers(2, 6)))

    ground_truth = []
    predictions = []
    for _ in range(n_images):
        anns = []
        dets = []
        for cls in range(n_classes):
            for _ in range(int(rng.integers(0, 3))):
                anns.append(BoxAnnotation(box=random_box(), class_id=cls))
            for _ in range(int(rng.integers(0, 4))):
                dets.append(Detection(box=random_box(), class_id=cls,
                                      score=float(rng.random())))
        ground_truth.append(anns)
        predictions.append(dets)
    return predictions, ground_truth
