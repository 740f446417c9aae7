import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from ticlab.estimator import TICEditor
from ticlab.schedule import make_schedule
from ticlab.synth_data import make_split

torch.set_num_threads(int(os.environ.get("TICLAB_NUM_THREADS", "1")))

CACHE_DIR = Path(os.environ.get("TICLAB_TEST_CACHE", Path(__file__).parent / ".cache"))

# the toy model every model-dependent test shares; trained once, then cached
DATA = {"seed": 0, "n_train": 2000, "n_test": 24}
EDITOR = {"epochs": 20, "seed": 0}

_ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    _ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def acceptance():
    return record_acceptance


@pytest.fixture(scope="session")
def sd_schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def dataset():
    return make_split(**DATA)


def _cache_key():
    blob = json.dumps({"data": DATA, "editor": EDITOR}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@pytest.fixture(scope="session")
def trained_editor(dataset):
    """Toy model trained on the default synthetic split (cached across sessions)."""
    path = CACHE_DIR / f"editor_{_cache_key()}"
    if (path / "manifest.json").is_file():
        return TICEditor.load(path)
    editor = TICEditor(**EDITOR).fit(dataset.images("train"), dataset.prompts("train"))
    editor.save(path)
    return editor


@pytest.fixture(scope="session")
def trained_model(trained_editor):
    return trained_editor.model_


@pytest.fixture(scope="session")
def codec(trained_editor):
    return trained_editor.codec_


@pytest.fixture(scope="session")
def test_images(dataset):
    return dataset.images("test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
