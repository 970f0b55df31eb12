import sys

import pytest

from eevo.model import ModelConfig, init_random
from eevo.policy import ExitPolicy, ThresholdSchedule


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(L=4, d_model=32, d_vocab=64, n_heads=4, d_ff=64, max_seq=32)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_random(small_config, seed=7)


@pytest.fixture(scope="session")
def default_model():
    return init_random(ModelConfig(L=8, d_model=64, d_vocab=512, n_heads=4, d_ff=256, max_seq=64), seed=1)


def make_policy(lam=0.6, measure="top2_diff", p=2, K=16, N=8, schedule="static", tau=4.0):
    return ExitPolicy(
        measure=measure,
        schedule=ThresholdSchedule(kind=schedule, lam=lam, tau=tau),
        prune_exit=p,
        prune_size=K,
        max_new_tokens=N,
    )


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
