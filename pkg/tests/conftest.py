import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deskiba import classifier as clf  # noqa: E402
from deskiba import evaluate as ev  # noqa: E402
from deskiba import synth  # noqa: E402

TINY_COUNTS = {"CT-0": 12, "CT-1": 6, "CT-2": 4, "CT-3": 3, "CT-4": 2}


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth.generate_dataset(TINY_COUNTS, seed=11)


@pytest.fixture(scope="session")
def default_dataset():
    return synth.generate_dataset(seed=0)


class Trained:
    def __init__(self, model, history, seconds, stats):
        self.model, self.history, self.seconds, self.stats = model, history, seconds, stats


def _train(arch, dataset):
    model = clf.build_model(arch, seed=0)
    t0 = time.perf_counter()
    history = clf.train(model, dataset, clf.TrainConfig(seed=0))
    seconds = time.perf_counter() - t0
    return Trained(model, history, seconds, clf.estimate_stats(model, clf.default_stats_images(dataset)))


@pytest.fixture(scope="session")
def trained_a(default_dataset):
    return _train("DeskNet-A", default_dataset)


@pytest.fixture(scope="session")
def trained_b(default_dataset):
    return _train("DeskNet-B", default_dataset)


@pytest.fixture(scope="session")
def comparison(default_dataset, trained_a, trained_b):
    """Full IBA vs Grad-CAM run on the default test split, with both architectures."""
    t0 = time.perf_counter()
    report = ev.compare_methods(
        trained_a.model,
        default_dataset.test,
        trained_a.stats,
        model_b=trained_b.model,
        stats_b=trained_b.stats,
    )
    return report, time.perf_counter() - t0
