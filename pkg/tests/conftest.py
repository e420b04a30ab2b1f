import numpy as np
import pytest
import torch

from tvrl.data.synthetic import LongitudinalConfig, generate_longitudinal_synthetic
from tvrl.encoder import EncoderConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return EncoderConfig(image_size=16, patch_size=4, hidden_dim=16, spatial_heads=2, spatial_layers=2,
                         temporal_layers=1, temporal_heads=2)


@pytest.fixture(scope="session")
def tiny_manifest():
    return generate_longitudinal_synthetic(40, LongitudinalConfig(image_size=16), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
