import time

import numpy as np
import pytest

from aelink import autoenc

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


SISO = autoenc.SystemConfig(7, 4)
MIMO = autoenc.SystemConfig(1, 2, 2, 2)

# fixture name -> wall-clock training seconds
TRAIN_SECONDS = {}


def _timed(name, build, system, cfg):
    t0 = time.perf_counter()
    model = autoenc.train_model(build(system, cfg))
    TRAIN_SECONDS[name] = time.perf_counter() - t0
    return model


@pytest.fixture(scope="session")
def siso_rayleigh_model():
    """(7,4), genie CSI, per-use Rayleigh fading, default schedule."""
    cfg = autoenc.TrainConfig(fading="per-use", seed=0)
    return _timed("siso_rayleigh", autoenc.build_siso_autoencoder, SISO, cfg)


@pytest.fixture(scope="session")
def siso_block_model():
    """(7,4), genie CSI, block Rayleigh fading, default schedule."""
    return _timed("siso_block", autoenc.build_siso_autoencoder, SISO, autoenc.TrainConfig(seed=0))


@pytest.fixture(scope="session")
def siso_awgn_model():
    """(7,4) in AWGN-only mode, default schedule at 6 dB."""
    cfg = autoenc.TrainConfig(channel="awgn-only", seed=0)
    return _timed("siso_awgn", autoenc.build_siso_autoencoder, SISO, cfg)


@pytest.fixture(scope="session")
def siso_awgn_lowsnr_model():
    """(7,4) in AWGN-only mode trained at 2 dB with a larger step."""
    cfg = autoenc.TrainConfig(channel="awgn-only", seed=0, learning_rate=0.05, train_ebn0_db=2.0)
    return _timed("siso_awgn_lowsnr", autoenc.build_siso_autoencoder, SISO, cfg)


@pytest.fixture(scope="session")
def mimo_model():
    return _timed("mimo", autoenc.build_mimo_autoencoder, MIMO, autoenc.MimoTrainConfig(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
