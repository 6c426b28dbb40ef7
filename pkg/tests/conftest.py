import numpy as np
import pytest

from emac import kernels, synth

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    """Each available kernel module in turn."""
    return kernels.backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_DATASET = {
    "scene": {"h": 32, "w": 32, "n_frames": 5, "n_objects": [2, 5], "radius": 4},
    "splits": {"train": 2, "val": 1, "test": 1},
    "seed": 3,
}

TINY_RUN = {
    "model": {"dim": 16, "depth": 1, "heads": 2, "dec_depth": 2, "tcf_dim": 8},
    "optim": {"epochs": 1, "batch_size": 4},
}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    cfg = synth.DatasetConfig.from_dict(TINY_DATASET)
    synth.write_dataset(root, synth.generate_dataset(cfg), cfg)
    return root
