import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from patchscope import tensor as T

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    T.set_num_threads(1)
    yield
    T.set_num_threads(1)


# desk-scale fixtures shared by the acceptance suite and the population tests;
# built once per session (training takes several minutes on one core)

DESK_WIDTH_DIVISOR = 16
DESK_REPRESENTATION = "gradient"
DESK_EPOCHS = 10
# wall-clock seconds of the session-scoped training runs, for the runtime budgets
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    from patchscope.datasets import synth_generate

    return synth_generate(600, 600, 224, seed=0, out_dir=tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="session")
def desk_teacher(desk_data):
    from patchscope.nets import build, ladeda_config
    from patchscope.trainer import TrainConfig, fit

    import time

    t0 = time.perf_counter()
    model = build(ladeda_config(9, DESK_WIDTH_DIVISOR, representation=DESK_REPRESENTATION), seed=0)
    _, log = fit(model, desk_data, TrainConfig(max_epochs=DESK_EPOCHS, seed=0))
    TIMINGS["desk_teacher"] = time.perf_counter() - t0
    return model, log, desk_data


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
