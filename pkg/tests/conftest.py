import warnings

import numpy as np
import pytest

from spikeport import calibration, fixtures

# Degenerate-channel repairs are expected on random fixtures.
warnings.filterwarnings("ignore", message=".*degenerate channel.*")


@pytest.fixture(scope="session")
def toy_bundle():
    model, calib = fixtures.gen_toy_classifier(seed=11, count=128)
    stats = calibration.collect_stats(model, calib)
    normalized = calibration.normalize_model(model, stats)
    return model, calib, stats, normalized


@pytest.fixture(scope="session")
def minifpn_bundle():
    model, calib, probe = fixtures.gen_mini_fpn(seed=5, count=128)
    stats = calibration.collect_stats(model, calib)
    normalized = calibration.normalize_model(model, stats)
    return model, calib, probe, normalized


@pytest.fixture(scope="session")
def blob_bundle():
    model, calib, dataset, anchors = fixtures.gen_blob_detector(seed=7, count=50)
    stats = calibration.collect_stats(model, calib)
    normalized = calibration.normalize_model(model, stats)
    return model, calib, dataset, anchors, normalized


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
