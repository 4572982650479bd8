import dataclasses

import numpy as np
import pytest

from sfdnet.config import TrainConfig
from sfdnet.extractor import ExtractorConfig


def tiny_config(**changes) -> TrainConfig:
    """Fast config: 16 px input, 2 base channels, 12-dim embedding, 2 epochs."""
    cfg = TrainConfig(
        epochs=2,
        extractor=ExtractorConfig(input_size=16, base_channels=2, embed_dim=12),
    )
    synth = dataclasses.replace(cfg.data.synth, image_size=16, samples_per_class=20)
    cfg = dataclasses.replace(
        cfg, data=dataclasses.replace(cfg.data, synth=synth, train_per_class=8, augment_per_class=16)
    )
    return dataclasses.replace(cfg, **changes)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
