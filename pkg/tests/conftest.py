import numpy as np
import pytest

from bnadapt.layers import TrainSource
from bnadapt.segnet import NetworkSpec, ToyUNet


def small_model(seed=0, freeze=True, image_size=8, widths=(2, 3, 4)):
    """Same topology as toy-unet-v1 at a size cheap enough for finite differences."""
    spec = NetworkSpec(in_channels=1, num_classes=4, image_size=image_size, widths=widths)
    model = ToyUNet(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for _ in range(3):
        model.forward(rng.uniform(0, 1, size=(4, image_size, image_size, 1)), TrainSource(0.5))
    if freeze:
        model.freeze_source()
        model.phase = "pretrained"
    return model


@pytest.fixture
def tiny_model():
    return small_model()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
