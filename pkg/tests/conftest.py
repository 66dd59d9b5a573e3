import numpy as np
import pytest
import torch

from dinoy.data import DataConfig
from dinoy.model import DinoY, ModelConfig

TINY = ModelConfig(
    d=32,
    n_heads=4,
    n_points=2,
    enc_layers=1,
    dec_layers=2,
    d_ff=64,
    num_queries=20,
    backbone_channels=(8, 16, 16, 24, 32),
    text_layers=1,
    keypoint_layers=2,
    lm_dim=32,
    lm_layers=2,
)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY


@pytest.fixture
def tiny_model() -> DinoY:
    torch.manual_seed(0)
    return DinoY(TINY).eval()


@pytest.fixture
def small_data() -> DataConfig:
    return DataConfig(image_size=64, scale_range=(5, 10), n_train=40, n_val=12)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for num in sorted(LINES):
            terminalreporter.write_line(LINES[num])
