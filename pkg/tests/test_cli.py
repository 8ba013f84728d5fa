import json
import os

import numpy as np
import pytest

from spikeport.cli import main
from spikeport.tensorio import read_tensor, write_tensor


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["gen-fixtures", "--kind", "toy-classifier", "--seed", "3",
                 "--count", "96", "--out-dir", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def toy_converted(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("conv") / "normalized.json"
    code = main(["convert", "--model", str(toy_dir / "model.json"),
                 "--calib", str(toy_dir / "calib.tns"), "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def blob_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("blob")
    assert main(["gen-fixtures", "--kind", "blob-detector", "--seed", "5",
                 "--count", "6", "--out-dir", str(root)]) == 0
    out = root / "normalized.json"
    assert main(["convert", "--model", str(root / "model.json"),
                 "--calib", str(root / "calib.tns"), "--out", str(out)]) == 0
    return root


class TestGenFixtures:
    def test_deterministic_across_invocations(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["gen-fixtures", "--kind", "mini-fpn-detector",
                         "--seed", "9", "--count", "4",
                         "--out-dir", str(tmp_path / sub)]) == 0
        for name in ("model.json", "mini-fpn-detector.bin", "calib.tns"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_bad_kind_is_usage_error(self, tmp_path, capsys):
        code = main(["gen-fixtures", "--kind", "nope", "--out-dir", str(tmp_path)])
        assert code == 2


class TestConvert:
    def test_reports_coverage(self, toy_dir, tmp_path, capsys):
        out = tmp_path / "norm.json"
        code = main(["convert", "--model", str(toy_dir / "model.json"),
                     "--calib", str(toy_dir / "calib.tns"), "--out", str(out)])
        assert code == 0
        captured = capsys.readouterr().out
        assert "in-[0,1]" in captured
        assert out.exists()
        assert (tmp_path / "norm.stats.json").exists()

    def test_missing_calib_exits_2(self, toy_dir, tmp_path):
        code = main(["convert", "--model", str(toy_dir / "model.json"),
                     "--calib", str(tmp_path / "missing.tns"),
                     "--out", str(tmp_path / "n.json")])
        assert code == 2

    def test_degenerate_percentiles_warn_but_convert(self, toy_dir, tmp_path, capsys):
        out = tmp_path / "norm.json"
        with pytest.warns(UserWarning, match="degenerate"):
            code = main(["convert", "--model", str(toy_dir / "model.json"),
                         "--calib", str(toy_dir / "calib.tns"),
                         "--p-lo", "50", "--p-hi", "50", "--out", str(out)])
        assert code == 0


class TestSimulate:
    def test_rates_csv_in_unit_interval(self, toy_dir, toy_converted, tmp_path):
        image = tmp_path / "img.tns"
        write_tensor(image, read_tensor(toy_dir / "calib.tns")[0])
        rates_csv = tmp_path / "rates.csv"
        code = main(["simulate", "--model", str(toy_converted),
                     "--image", str(image), "--duration", "300",
                     "--rates-out", str(rates_csv)])
        assert code == 0
        lines = rates_csv.read_text().strip().splitlines()
        assert lines[0].startswith("step,node_id")
        for line in lines[1:]:
            parts = line.split(",")
            assert all(0.0 <= float(v) <= 1.0 for v in parts[2:])

    def test_transient_longer_than_duration_exits_2(self, toy_converted, toy_dir,
                                                    tmp_path):
        image = tmp_path / "img.tns"
        write_tensor(image, read_tensor(toy_dir / "calib.tns")[0])
        code = main(["simulate", "--model", str(toy_converted),
                     "--image", str(image), "--duration", "1000",
                     "--transient", "2000"])
        assert code == 2

    def test_unnormalized_model_refused(self, toy_dir, tmp_path):
        image = tmp_path / "img.tns"
        write_tensor(image, read_tensor(toy_dir / "calib.tns")[0])
        code = main(["simulate", "--model", str(toy_dir / "model.json"),
                     "--image", str(image), "--duration", "100"])
        assert code == 2

    def test_deterministic_outputs(self, toy_dir, toy_converted, tmp_path):
        image = tmp_path / "img.tns"
        write_tensor(image, read_tensor(toy_dir / "calib.tns")[1])
        outputs = []
        for sub in ("r1", "r2"):
            raster_dir = tmp_path / sub
            csv_path = tmp_path / f"{sub}.csv"
            assert main(["simulate", "--model", str(toy_converted),
                         "--image", str(image), "--duration", "200",
                         "--rates-out", str(csv_path),
                         "--raster-out", str(raster_dir)]) == 0
            raster = next(p for p in raster_dir.iterdir())
            outputs.append((csv_path.read_bytes(), raster.read_bytes()))
        assert outputs[0] == outputs[1]


class TestCorrelate:
    def test_zero_timestamp_rejected(self, toy_dir, toy_converted, tmp_path):
        image = tmp_path / "img.tns"
        write_tensor(image, read_tensor(toy_dir / "calib.tns")[0])
        code = main(["correlate", "--model", str(toy_dir / "model.json"),
                     "--normalized", str(toy_converted), "--image", str(image),
                     "--at", "0", "--out-dir", str(tmp_path)])
        assert code == 2

    def test_self_check_reports_unity(self, toy_dir, toy_converted, tmp_path, capsys):
        image = tmp_path / "img.tns"
        write_tensor(image, read_tensor(toy_dir / "calib.tns")[0])
        code = main(["correlate", "--model", str(toy_dir / "model.json"),
                     "--normalized", str(toy_converted), "--image", str(image),
                     "--at", "50", "--duration", "50",
                     "--out-dir", str(tmp_path), "--self-check"])
        assert code == 0
        out = capsys.readouterr().out
        for line in out.splitlines():
            if ": r = " in line and "undefined" not in line:
                assert "+1.000000" in line

    def test_correlation_improves_with_time(self, toy_dir, toy_converted, tmp_path,
                                            capsys):
        image = tmp_path / "img.tns"
        write_tensor(image, read_tensor(toy_dir / "calib.tns")[2])
        code = main(["correlate", "--model", str(toy_dir / "model.json"),
                     "--normalized", str(toy_converted), "--image", str(image),
                     "--at", "100,1000", "--duration", "1000",
                     "--out-dir", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        values = {}
        for line in out.splitlines():
            if line.startswith("t=") and " c4: r = " in line:
                time_part = line.split("ms")[0][2:]
                values[float(time_part)] = float(line.split("r = ")[1])
        assert values[1000.0] > values[100.0]
        assert (tmp_path / "correlation_100ms.csv").exists()
        assert (tmp_path / "correlation_1000ms.csv").exists()


class TestEvaluate:
    def test_blob_dataset_series(self, blob_dir, tmp_path, capsys):
        out_csv = tmp_path / "map.csv"
        code = main(["evaluate", "--model", str(blob_dir / "model.json"),
                     "--normalized", str(blob_dir / "normalized.json"),
                     "--dataset", str(blob_dir / "dataset"),
                     "--duration", "300", "--sample-every", "100",
                     "--anchors", str(blob_dir / "anchors.json"),
                     "--out", str(out_csv)])
        assert code == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "time_ms,class,ap,map"
        assert any(line.startswith("-1,") for line in lines)  # analog reference
        assert sum(1 for line in lines if not line.startswith("-1,")) >= 3

    def test_empty_dataset_exits_2(self, blob_dir, tmp_path):
        empty = tmp_path / "empty"
        os.makedirs(empty)
        (empty / "annotations.json").write_text(json.dumps({"images": []}))
        code = main(["evaluate", "--model", str(blob_dir / "model.json"),
                     "--normalized", str(blob_dir / "normalized.json"),
                     "--dataset", str(empty), "--duration", "100",
                     "--sample-every", "50",
                     "--anchors", str(blob_dir / "anchors.json"),
                     "--out", str(tmp_path / "m.csv")])
        assert code == 2

    def test_non_detector_model_rejected(self, toy_dir, toy_converted, blob_dir,
                                         tmp_path):
        code = main(["evaluate", "--model", str(toy_dir / "model.json"),
                     "--normalized", str(toy_converted),
                     "--dataset", str(blob_dir / "dataset"),
                     "--duration", "100", "--sample-every", "50",
                     "--anchors", str(blob_dir / "anchors.json"),
                     "--out", str(tmp_path / "m.csv")])
        assert code == 2


class TestForward:
    def test_outputs_match_library(self, toy_dir, tmp_path):
        from spikeport import engine
        from spikeport.ir import load_model

        batch_path = tmp_path / "batch.tns"
        batch = read_tensor(toy_dir / "calib.tns")[:3]
        write_tensor(batch_path, batch)
        code = main(["forward", "--model", str(toy_dir / "model.json"),
                     "--input", str(batch_path), "--out-dir", str(tmp_path)])
        assert code == 0
        model = load_model(toy_dir / "model.json")
        expected = engine.forward_outputs(model, batch)
        produced = read_tensor(tmp_path / "out_c4.tns")
        np.testing.assert_array_equal(produced, expected[0])

    def test_missing_model_exits_2(self, tmp_path):
        code = main(["forward", "--model", str(tmp_path / "nope.json"),
                     "--input", str(tmp_path / "x.tns"),
                     "--out-dir", str(tmp_path)])
        assert code == 2
