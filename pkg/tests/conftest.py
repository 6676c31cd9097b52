import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from partassembly.config import load_config
from partassembly.synthetic import GeneratorSpec, generate

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny():
    """(ModelConfig, TrainConfig) for the small float64 network."""
    model, train, _ = load_config(preset="tiny")
    return model, train


@pytest.fixture(scope="session")
def chairs16():
    return generate(GeneratorSpec(category="chair", count=8, n_pc=16, seed=3, dense=512))


@pytest.fixture(scope="session")
def mixed():
    out = []
    for i, cat in enumerate(("chair", "table", "lamp")):
        out += generate(GeneratorSpec(category=cat, count=4, n_pc=16, seed=11 + i, dense=512))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


# acceptance verdicts, printed once at the end of the session
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
