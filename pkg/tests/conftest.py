import pytest
import torch

from ddbench.archs import ConvNetSmall, ModelSpec
from ddbench.datahub import load_dataset
from ddbench.teachers import TeacherHandle, TeacherRecipe, train_teacher

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def digits():
    """(train, test, spec) of the offline digits32 desk dataset."""
    return load_dataset("digits32")


@pytest.fixture(scope="session")
def teacher(digits):
    """Briefly trained convnet-small teacher on digits32 (shared, frozen)."""
    train, test, spec = digits
    ms = ModelSpec("convnet-small", spec.resolution, spec.num_classes)
    return train_teacher(ms, train, TeacherRecipe(epochs=4, batch_size=64), test, "digits32")


def make_toy_teacher(num_classes: int = 10, width: int = 4, seed: int = 0, dtype=torch.float64,
                     dataset: str = "digits32") -> TeacherHandle:
    """Narrow convnet with non-trivial BN running statistics, in double precision."""
    torch.manual_seed(seed)
    model = ConvNetSmall(num_classes, width=width)
    g = torch.Generator().manual_seed(seed + 1)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(torch.randn(m.num_features, generator=g) * 0.1)
            m.running_var.copy_(torch.rand(m.num_features, generator=g) + 0.5)
    model = model.to(dtype).eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return TeacherHandle(ModelSpec("convnet-small", 32, num_classes), model, float("nan"), "toy", seed, dataset)


@pytest.fixture
def toy_teacher():
    return make_toy_teacher()


@pytest.fixture(scope="session")
def toy2_teacher(digits):
    """Two-class (digits 0 vs 1) convnet-small teacher in double precision."""
    import numpy as np

    from ddbench.datahub import ArraySplit

    train, _, spec = digits
    idx = np.flatnonzero(train.labels < 2)
    sub = ArraySplit(train.pixels(idx), train.labels[idx], spec)
    h = train_teacher(ModelSpec("convnet-small", 32, 2), sub, TeacherRecipe(epochs=5, batch_size=32, seed=0))
    return TeacherHandle(h.spec, h.model.double(), h.test_accuracy, h.recipe_fingerprint, 0, "digits32")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
