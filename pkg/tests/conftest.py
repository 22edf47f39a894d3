import numpy as np
import pytest

from pcrobust import data, models, training
from pcrobust.numerics import numerical_grad

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion", 1)[1].split(":")[0])):
            terminalreporter.write_line(line)


def fd_compare(fn, arrays, h=1e-5):
    """Analytic grads of scalar ``fn`` (Tensor -> Tensor) vs central differences.

    Returns the worst relative error over all arguments.
    """
    from pcrobust import numerics as nx

    analytic = nx.grad(fn, *arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [nx.Tensor(np.array(b, dtype=np.float64)) for b in arrays]
            args[i] = nx.Tensor(v)
            return fn(*args).item()

        num = numerical_grad(f, a, h)
        worst = max(worst, nx.relative_error(analytic[i], num))
    return worst


@pytest.fixture(scope="session")
def blobs():
    """Small separable 4-class problem on 1x4x4 'images'."""
    train = data.synth_split(4, 60, 16, 0.08, anchor_seed=3, sample_seed=3, image_shape=(1, 4, 4))
    test = data.synth_split(4, 25, 16, 0.08, anchor_seed=3, sample_seed=4, image_shape=(1, 4, 4), split="test")
    return train, test


@pytest.fixture(scope="session")
def blob_mlp(blobs):
    train, _ = blobs
    net = models.build(models.ArchitectureSpec("mlp", (1, 4, 4), 4, hidden=(16,)), seed=1)
    training.train(net, train, training.TrainConfig(warmup_epochs=15, total_epochs=15, batch_size=32, seed=1))
    return net
