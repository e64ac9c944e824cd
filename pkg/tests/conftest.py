import numpy as np
import pytest
import torch
import torch.nn as nn

from conceptregions.model_adapter import GlobalAvgPoolHead, StagedClassifier, set_deterministic
from conceptregions.synthetic import build_toy_classifier


@pytest.fixture(autouse=True)
def _deterministic():
    set_deterministic(0)
    yield


def randomize_bn(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, nn.BatchNorm2d):
            mod.running_mean.copy_(torch.randn(mod.num_features, generator=g) * 0.1)
            mod.running_var.copy_(torch.rand(mod.num_features, generator=g) + 0.5)
    return model


@pytest.fixture
def tiny_cnn():
    """Two stages (4 then 8 channels) on 8x8 inputs, float64."""
    model = build_toy_classifier((4, 8), num_classes=3, input_size=8, seed=3)
    return randomize_bn(model).double().eval()


@pytest.fixture
def toy4():
    """Four-stage toy classifier on 16x16 inputs, float64."""
    model = build_toy_classifier((4, 6, 6, 8), num_classes=3, input_size=16, seed=5)
    return randomize_bn(model).double().eval()


def linear_probe_model(channels=4, classes=2, size=4, seed=0, carrier=None):
    """1x1 conv stage + average-pool linear head; optionally only ``carrier`` feeds the head."""
    torch.manual_seed(seed)
    conv = nn.Conv2d(3, channels, 1)
    fc = nn.Linear(channels, classes)
    if carrier is not None:
        with torch.no_grad():
            fc.weight.zero_()
            fc.bias.zero_()
            fc.weight[0, carrier] = 2.0
    model = StagedClassifier([conv], GlobalAvgPoolHead(fc), None, (3, size, size), name="probe")
    return model.double().eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
