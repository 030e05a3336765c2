import numpy as np
import pytest
import torch

from synthcf.model import ModelConfig, init_parameters

torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(num_units=3, num_covariates=2, max_time=12, num_layers=1, num_heads=1, hidden_dim=8,
              dropout_rate=0.0, l_minus=4, l_plus=2)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def tiny_params():
    """Tiny float64 model with weights large enough to leave the linear regime."""
    return init_parameters(tiny_config(), seed=7, dtype=torch.float64, std=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)
