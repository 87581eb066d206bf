import numpy as np
import pytest
import torch

from octpair.phantom import InsertionConfig, SceneLayout, TissueLayerSpec, acquisition_config
from octpair.preprocess import PreprocessConfig, simulate_crops

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.use_deterministic_algorithms(True)
    yield
    torch.use_deterministic_algorithms(False)


def layered_config(seed=0, duration=3.0, rate=1000.0, velocity=100.0, meat="beef", depth=250):
    layers = (
        TissueLayerSpec.of("gelatin", 80),
        TissueLayerSpec.of(meat, 60),
        TissueLayerSpec.of("gelatin", None),
    )
    return InsertionConfig(layers, insertion_velocity=velocity, a_scan_rate=rate, duration=duration,
                           depth_samples=depth, seed=seed)


@pytest.fixture
def small_config():
    return layered_config()


@pytest.fixture(scope="session")
def tiny_crops():
    """A few dozen crop pairs from nine short simulated insertions."""
    base = acquisition_config(a_scan_rate=250.0, insertion_velocity=20.0, depth_samples=250)
    layout = SceneLayout(n_layers=(3, 3), duration=(45.0, 50.0))
    crops, _, _ = simulate_crops({"beef": 3, "pork": 3, "turkey": 3}, base, 5, layout, PreprocessConfig(window=4))
    return crops


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line per criterion; the terminal summary prints them in order."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
