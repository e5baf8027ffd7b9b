import sys
from pathlib import Path

import pytest
import torch

from cdgan.networks import NetConfig
from cdgan.phantom import PhantomSpec, generate_dataset

sys.path.insert(0, str(Path(__file__).parent))


def tiny_net(**kw):
    base = dict(image_size=(16, 16), base_width=4, stages=2, rep_dim=8)
    base.update(kw)
    return NetConfig(**base)


def tiny_spec(**kw):
    base = dict(image_size=(16, 16), slices_per_volume=4, seed=7)
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_phantoms")
    train, test = generate_dataset(tiny_spec(), subjects_per_phase=3, split_fraction=0.67, out_dir=root)
    return root, train, test


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
