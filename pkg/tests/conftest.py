import sys

import numpy as np
import pytest
from hypothesis import settings

from adaprune.eap import EapConfig, calibrate
from adaprune.harness.episodes import build_calibration, two_regime_spec
from adaprune.model import ModelConfig, init_model

settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile("ci")

SMALL = ModelConfig(n_blocks=2, d_model=32, n_heads=4, d_head=8, d_ff=64, seq_len=12, n_visual=6, d_visual=10, expert_width=8, seed=0)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return init_model(SMALL)


@pytest.fixture
def small_calib(small_model):
    spec = two_regime_spec(8, 4, 0.01, 0, n_visual=SMALL.n_visual, d_visual=SMALL.d_visual)
    return calibrate(small_model, build_calibration(spec, 4))


@pytest.fixture
def eap_cfg():
    return EapConfig(window=4, p=80.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
