import numpy as np
import pytest

from pesimt.model import Model, ModelConfig


def micro_config(**kw) -> ModelConfig:
    """Tiny model used by the gradient and routing checks."""
    base = dict(src_vocab=12, tgt_vocab=11, d_model=8, ffn_dim=16, layers=1, heads=2,
                n_translated=2, n_untranslated=2, routing_iters=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def small_config(**kw) -> ModelConfig:
    base = dict(src_vocab=30, tgt_vocab=30, d_model=16, ffn_dim=32, layers=2, heads=2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def micro_model():
    return Model(micro_config(), seed=0)


@pytest.fixture(scope="session")
def small_model():
    return Model(small_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, line: str) -> None:
    _ACCEPTANCE[n] = line


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
