import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctflow import layers
from ctflow.glow import FlowModel, ModelConfig

settings.register_profile("ci", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(f, x, index, h=FD_STEP):
    """Central finite difference of scalar f at array x along one flat coordinate."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    old = flat[index]
    flat[index] = old + h
    up = f(x)
    flat[index] = old - h
    down = f(x)
    flat[index] = old
    return (up - down) / (2 * h)


def jacobian_fd(f, x, h=FD_STEP):
    """Dense Jacobian of a vector map by central differences, shape (out, in)."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        up = np.ravel(f(x + e.reshape(x.shape)))
        down = np.ravel(f(x - e.reshape(x.shape)))
        cols.append((up - down) / (2 * h))
    return np.stack(cols, axis=1)


def perturb_params(model, rng, scale=0.05):
    """Give every zero-initialised weight a small random value so nothing is trivially the identity."""
    for name, arr in model.params.items():
        if name.endswith("invconv.weight"):
            continue
        arr += scale * rng.standard_normal(arr.shape)
    model.initialized = True
    return model


def identity_model(shape=(4, 4, 4, 1), levels=2):
    model = FlowModel(ModelConfig(levels=levels, depth=1, width=4, shape=shape, prior="standard"))
    h_identity = layers.SCALE_SHIFT + math.log(0.4 / 0.6)  # sigmoid(h - 0.1) + 0.6 == 1
    for name, arr in model.params.items():
        if name.endswith("invconv.weight"):
            arr[...] = np.eye(arr.shape[0])
        elif name.endswith("coupling.b3"):
            arr[: arr.size // 2] = h_identity
    model.initialized = True
    return model


@pytest.fixture
def toy_model():
    model = FlowModel(ModelConfig(levels=2, depth=1, width=4, shape=(4, 4, 4, 1), seed=3))
    return perturb_params(model, np.random.default_rng(0))


@pytest.fixture(scope="session")
def trained_toy():
    """A small model trained briefly on 8^3 phantoms, with its training volumes."""
    from ctflow import data, train

    volumes = [data.generate_phantom(data.PhantomSpec(seed=s, size=8)) for s in range(48)]
    model = FlowModel(ModelConfig(levels=2, depth=2, width=16, shape=(8, 8, 8, 1), seed=0))
    train.train(model, volumes, train.TrainConfig(epochs=15, batch_schedule=((0, 8),), lr=3e-3, warmup_epochs=1, seed=0))
    return model, volumes


DESK_TRAIN_SEEDS = range(0, 200)
DESK_HELDOUT_SEEDS = range(1000, 1050)


@pytest.fixture(scope="session")
def desk_run():
    """Desk-config model trained on 200 16^3 phantoms for 20 epochs (shared by the slow tests)."""
    import time

    from ctflow import data, train

    volumes = [data.generate_phantom(data.PhantomSpec(seed=s)) for s in DESK_TRAIN_SEEDS]
    model = FlowModel(ModelConfig())
    start = time.process_time()
    report = train.train(model, volumes, train.TrainConfig(epochs=20, seed=0))
    return model, report, time.process_time() - start


@pytest.fixture(scope="session")
def heldout():
    from ctflow import data

    return [data.generate_phantom(data.PhantomSpec(seed=s)) for s in DESK_HELDOUT_SEEDS]


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
