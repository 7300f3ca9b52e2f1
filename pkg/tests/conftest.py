import numpy as np
import pytest
import torch

from dfrnet.haze import generate_dataset, load_pairs

ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"AC{key}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """Four 32x32 pairs, moderately hazy."""
    root = tmp_path_factory.mktemp("toy32")
    manifest = generate_dataset(4, 32, 32, (0.05, 0.2), 7, root)
    return manifest, load_pairs(manifest)


@pytest.fixture(scope="session")
def toy_data64(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy64")
    manifest = generate_dataset(4, 64, 64, (0.05, 0.2), 7, root)
    return manifest, load_pairs(manifest)
