import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeport import detection, fixtures
from spikeport.detection import (
    AnchorConfig,
    AnchorLevel,
    BoxAnnotation,
    Detection,
    decode_detections,
    evaluate_map,
    iou,
    load_dataset,
    map_convergence,
    save_dataset,
)
from spikeport.errors import ToolError
from spikeport.snn import SimConfig, build_snn

from oracles import iou_reference, map_reference, random_detection_instance

boxes_strategy = st.tuples(
    st.floats(0, 10), st.floats(0, 10), st.floats(0.5, 8), st.floats(0.5, 8)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


class TestIoU:
    def test_identical_boxes(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0

    def test_disjoint_boxes(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_half_overlapping_unit_squares(self):
        assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1.0 / 3.0)

    @settings(max_examples=60, deadline=None)
    @given(a=boxes_strategy, b=boxes_strategy)
    def test_symmetric_bounded_and_matches_reference(self, a, b):
        v = iou(a, b)
        assert v == pytest.approx(iou(b, a))
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou_reference(a, b), abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(a=boxes_strategy)
    def test_one_only_for_identical(self, a):
        assert iou(a, a) == pytest.approx(1.0)


def _single_level_anchors(score=0.5):
    return AnchorConfig(
        levels=[AnchorLevel(stride=1, sizes=[5.0], ratios=[1.0])],
        score_threshold=score, nms_iou=0.5,
    )


class TestDecode:
    def test_all_below_threshold_gives_empty(self):
        logits = np.full((8, 8, 1), -30.0, np.float32)
        deltas = np.zeros((8, 8, 4), np.float32)
        dets = decode_detections([logits, deltas], _single_level_anchors(), (8, 8))
        assert dets == []

    def test_zero_deltas_reproduce_anchor(self):
        logits = np.full((8, 8, 1), -30.0, np.float32)
        logits[4, 3, 0] = 5.0
        deltas = np.zeros((8, 8, 4), np.float32)
        dets = decode_detections([logits, deltas], _single_level_anchors(), (8, 8))
        assert len(dets) == 1
        # anchor centered at (3.5, 4.5), size 5 -> (1, 2, 6, 7)
        np.testing.assert_allclose(dets[0].box, (1.0, 2.0, 6.0, 7.0))
        assert dets[0].score == pytest.approx(1 / (1 + np.exp(-5.0)))

    def test_delta_parameterization(self):
        logits = np.full((8, 8, 1), -30.0, np.float32)
        logits[4, 4, 0] = 5.0
        deltas = np.zeros((8, 8, 4), np.float32)
        deltas[4, 4] = [0.2, -0.1, np.log(2.0), 0.0]
        dets = decode_detections([logits, deltas], _single_level_anchors(), (32, 32))
        (x0, y0, x1, y1) = dets[0].box
        assert (x1 + x0) / 2 == pytest.approx(4.5 + 0.2 * 5)   # cx shifted
        assert (y1 + y0) / 2 == pytest.approx(4.5 - 0.1 * 5)   # cy shifted
        assert x1 - x0 == pytest.approx(10.0)                  # width doubled
        assert y1 - y0 == pytest.approx(5.0)

    def test_nms_keeps_higher_scored_duplicate(self):
        logits = np.full((8, 8, 1), -30.0, np.float32)
        deltas = np.zeros((8, 8, 4), np.float32)
        logits[4, 4, 0] = np.log(0.9 / 0.1)
        # identical box via deltas from the neighbouring cell
        logits[4, 5, 0] = np.log(0.8 / 0.2)
        deltas[4, 5, 0] = -1.0 / 5.0  # shift one stride left -> same box
        dets = decode_detections([logits, deltas], _single_level_anchors(), (32, 32))
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(0.9)

    def test_boxes_clipped_to_image(self):
        logits = np.full((8, 8, 1), -30.0, np.float32)
        logits[0, 0, 0] = 5.0
        deltas = np.zeros((8, 8, 4), np.float32)
        dets = decode_detections([logits, deltas], _single_level_anchors(), (8, 8))
        assert dets[0].box[0] == 0.0 and dets[0].box[1] == 0.0

    def test_head_count_mismatch(self):
        logits = np.zeros((8, 8, 1), np.float32)
        with pytest.raises(ToolError, match="pair"):
            decode_detections([logits], _single_level_anchors(), (8, 8))

    def test_translation_equivariance_by_whole_strides(self):
        model, anchors = fixtures.gen_blob_model(32)
        base = np.full((32, 32, 1), 0.08, np.float32)
        img_a = base.copy()
        img_a[6:11, 6:11, 0] = 0.9
        img_b = base.copy()
        img_b[9:14, 13:18, 0] = 0.9  # shifted by (7, 3) strides
        det_a = detection.analog_detections(model, img_a, anchors)
        det_b = detection.analog_detections(model, img_b, anchors)
        assert len(det_a) == len(det_b) == 1
        shift = np.array(det_b[0].box) - np.array(det_a[0].box)
        np.testing.assert_allclose(shift, [7, 3, 7, 3], atol=1e-5)


class TestEvaluateMap:
    def test_perfect_single_detection(self):
        gt = [[BoxAnnotation(box=(0, 0, 4, 4), class_id=0)]]
        preds = [[Detection(box=(0, 0, 4, 4), class_id=0, score=0.9)]]
        report = evaluate_map(preds, gt)
        assert report.mean_ap == pytest.approx(1.0)

    def test_low_iou_detection_scores_zero(self):
        gt = [[BoxAnnotation(box=(0, 0, 4, 4), class_id=0)]]
        preds = [[Detection(box=(2.8, 0, 6.8, 4), class_id=0, score=0.9)]]
        assert iou(preds[0][0].box, gt[0][0].box) < 0.5
        report = evaluate_map(preds, gt, iou_threshold=0.5)
        assert report.mean_ap == pytest.approx(0.0)

    def test_precision_envelope_ignores_trailing_fp(self):
        gt = [[BoxAnnotation(box=(0, 0, 4, 4), class_id=0)]]
        preds = [[
            Detection(box=(0, 0, 4, 4), class_id=0, score=0.9),   # TP
            Detection(box=(10, 10, 14, 14), class_id=0, score=0.8),  # FP
        ]]
        report = evaluate_map(preds, gt)
        assert report.mean_ap == pytest.approx(1.0)

    def test_classes_without_gt_excluded(self):
        gt = [[BoxAnnotation(box=(0, 0, 4, 4), class_id=1)]]
        preds = [[
            Detection(box=(0, 0, 4, 4), class_id=1, score=0.9),
            Detection(box=(0, 0, 4, 4), class_id=3, score=0.9),  # no GT class
        ]]
        report = evaluate_map(preds, gt)
        assert set(report.per_class_ap) == {1}
        assert report.mean_ap == pytest.approx(1.0)

    def test_no_ground_truth_is_undefined(self):
        report = evaluate_map([[]], [[]])
        assert report.mean_ap is None

    @pytest.mark.parametrize("chunk", range(4))
    def test_matches_bruteforce_oracle(self, chunk):
        rng = np.random.default_rng(100 + chunk)
        for _ in range(60):
            preds, gt = random_detection_instance(rng)
            expected_map, expected_aps = map_reference(preds, gt)
            report = evaluate_map(preds, gt)
            if expected_map is None:
                assert report.mean_ap is None
                continue
            assert report.mean_ap == pytest.approx(expected_map, abs=1e-9)
            for cls, ap in expected_aps.items():
                assert report.per_class_ap[cls] == pytest.approx(ap, abs=1e-9)


class TestDataset:
    def test_roundtrip(self, tmp_path, rng):
        dataset = fixtures.gen_blob_images(rng, 4)
        save_dataset(dataset, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert len(back) == 4
        for a, b in zip(dataset.images, back.images):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(dataset.annotations, back.annotations):
            assert [(x.box, x.class_id) for x in a] == [(x.box, x.class_id) for x in b]


@pytest.fixture(scope="module")
def small_blob():
    import warnings

    from spikeport import calibration

    model, calib, dataset, anchors = fixtures.gen_blob_detector(seed=3, count=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = calibration.collect_stats(model, calib)
    normalized = calibration.normalize_model(model, stats)
    return model, normalized, dataset, anchors


class TestConvergenceSeries:
    def test_single_sample_equals_final_rate_map(self, small_blob):
        model, normalized, dataset, anchors = small_blob
        config = SimConfig(duration=400)
        network = build_snn(normalized, config)
        series = map_convergence(network, dataset, config, 400.0, anchors,
                                 analog_model=model)
        assert series.times_ms == [400.0]

        final_preds = []
        for image in dataset.images:
            from spikeport.snn import run

            record = run(network, image, config)
            final_preds.append(detection.snn_detections(record.rates, normalized,
                                                        anchors))
        direct = evaluate_map(final_preds, dataset.annotations)
        assert series.mean_ap[0] == pytest.approx(direct.mean_ap)

    def test_transient_skip_no_worse_at_matched_wall_clock(self, small_blob):
        model, normalized, dataset, anchors = small_blob
        plain = SimConfig(duration=160)
        skipped = SimConfig(duration=160, transient=80)
        with_skip = map_convergence(
            build_snn(normalized, skipped), dataset, skipped, 160.0, anchors,
            analog_model=model,
        )
        without = map_convergence(
            build_snn(normalized, plain), dataset, plain, 160.0, anchors,
            analog_model=model,
        )
        assert with_skip.mean_ap[0] >= without.mean_ap[0] - 1e-9

    def test_csv_contains_reference_rows(self, small_blob, tmp_path):
        model, normalized, dataset, anchors = small_blob
        config = SimConfig(duration=200)
        network = build_snn(normalized, config)
        series = map_convergence(network, dataset, config, 100.0, anchors,
                                 analog_model=model)
        path = tmp_path / "map.csv"
        detection.write_map_csv(series, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "time_ms,class,ap,map"
        assert any(line.startswith("-1,") for line in lines[1:])
        assert any(line.startswith("100,") for line in lines[1:])
        assert any(line.startswith("200,") for line in lines[1:])

    def test_empty_dataset_rejected(self, small_blob):
        model, normalized, _, anchors = small_blob
        config = SimConfig(duration=100)
        network = build_snn(normalized, config)
        empty = detection.DetectionDataset(images=[], annotations=[])
        with pytest.raises(ToolError, match="empty"):
            map_convergence(network, empty, config, 50.0, anchors)
