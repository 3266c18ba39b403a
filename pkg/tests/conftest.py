import numpy as np
import pytest

from milnet import data


@pytest.fixture(scope="session")
def tiny_split():
    """16 one-second clips over 3 classes; 12 train, 4 test."""
    return data.synth_dataset(3, 16, 0.75, seed=21, num_test=4, duration_s=1.0)


@pytest.fixture(scope="session")
def tiny_sets(tiny_split):
    train = data.build_feature_set(tiny_split.train, tiny_split.classes)
    test = data.build_feature_set(tiny_split.test, tiny_split.classes, train.features.shape[1])
    return train, test


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion and fail the
    test when the criterion is not met."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
