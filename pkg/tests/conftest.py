import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stereohsi.model.network import Architecture

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# small enough for finite differences and quick training loops
TINY = Architecture(input_shape=(8, 8, 6), conv_channels=(2, 3),
                    conv_kernels=((3, 3, 3), (2, 2, 2)), pool_after=(0,), hidden=(4,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_arch():
    return TINY


REPRO_SEED = 7


@pytest.fixture(scope="session")
def repro_runs(tmp_path_factory):
    """Two independent ``repro --seed 7`` runs: ``[(out_dir, seconds), (out_dir, seconds)]``."""
    import time

    from stereohsi import cli

    runs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"repro{i}")
        start = time.perf_counter()
        rc = cli.main(["repro", "--seed", str(REPRO_SEED), "--out", str(out)])
        assert rc == 0
        runs.append((out, time.perf_counter() - start))
    return runs


def pytest_terminal_summary(terminalreporter):
    from _report import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
