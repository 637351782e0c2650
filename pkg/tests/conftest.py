import numpy as np
import pytest

from eki_deeponet.core import DomainMeta, OperatorDataset
from eki_deeponet.deeponet import DeepONetArch


def make_dataset(n=6, m=4, p=5, splits=None, seed=0):
    rng = np.random.default_rng(seed)
    if splits is None:
        splits = {"train": [0, 1, 2], "q_learn": [3], "stop": [4], "test": [5]}
    counts = {k: len(v) for k, v in splits.items()}
    return OperatorDataset(
        u_sensors=rng.standard_normal((n, m)),
        sensor_locations=np.linspace(0, 1, m)[:, None],
        query_points=np.linspace(0, 1, p)[:, None],
        outputs=rng.standard_normal((n, p)),
        sigma=np.full(n, 0.1),
        splits=splits,
        meta=DomainMeta("antiderivative", counts=counts, noise_percent=0.01, rng_seed=seed),
    )


@pytest.fixture
def small_dataset():
    return make_dataset()


@pytest.fixture
def toy_arch():
    return DeepONetArch((4, 3, 2), (1, 3, 2))


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one summary line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
