import pytest

from cora_lab.fixture import FixtureConfig
from cora_lab.model import ModelDims

TINY_DIMS = ModelDims(vocab_size=8, d_model=6, d_k=9, seq_len=12, d_ff=8)


@pytest.fixture
def tiny_fixture_cfg():
    return FixtureConfig(dims=TINY_DIMS, pretrain_steps=20, finetune_steps=10, batch_size=8)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
