import numpy as np
import pytest

from histocaps.capsnet import NetworkConfig, build_network
from histocaps.tensor import make_rng

# criterion name -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


TOY = dict(input_side=20, conv=((4, 3, 2), (8, 3, 2)), primary_capsule_dim=4, class_capsule_dim=6)


@pytest.fixture
def toy_config():
    return NetworkConfig(**TOY)


@pytest.fixture
def toy_net(toy_config):
    return build_network(toy_config, make_rng(3), precision="double")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
