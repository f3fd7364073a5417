import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from scanscd.config import ModelConfig  # noqa: E402
from scanscd.data import GeneratorSpec, ScdDataset, generate_dataset, generate_sample  # noqa: E402

CRITERIA: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _fixed_global_seed():
    torch.manual_seed(1234)


TINY = ModelConfig(height=16, width=16, channels_u=8, channels_v=8, change_layers=2,
                   stripe_width=2, attention_layers=1, heads_per_group=2)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def small_spec():
    return GeneratorSpec(seed=3, count=10, height=16, width=16)


@pytest.fixture(scope="session")
def small_samples(small_spec):
    return [generate_sample(small_spec, i).sample for i in range(small_spec.count)]


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory, small_spec):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(small_spec, root)
    return root


@pytest.fixture
def small_dataset(small_samples):
    return ScdDataset.from_samples(small_samples)
