import os
import pathlib

import pytest
import torch

torch.set_num_threads(1)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("BATCHSCHED_NIGHTLY") == "1":
        return
    skip = pytest.mark.skip(reason="nightly check, set BATCHSCHED_NIGHTLY=1")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def datadir() -> pathlib.Path:
    return pathlib.Path(__file__).parent / "data"
