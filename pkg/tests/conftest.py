import numpy as np
import pytest

from dlisc.lora import Role, merge_adapter, random_adapter
from dlisc.model import ModelConfig, ModelWeights
from dlisc.schemas import Schema, SchemaRegistry

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, max_position=4096, init_seed=3)


@pytest.fixture(scope="session")
def tiny_base():
    return ModelWeights.initialize(TINY)


@pytest.fixture(scope="session")
def tiny_models(tiny_base):
    ad_i = random_adapter(TINY, "i", 1, role=Role.IDENTIFY)
    ad_e = random_adapter(TINY, "e", 2, role=Role.EXTRACT)
    return merge_adapter(tiny_base, ad_i, Role.IDENTIFY), merge_adapter(tiny_base, ad_e, Role.EXTRACT)


@pytest.fixture(scope="session")
def default_base():
    return ModelWeights.initialize(ModelConfig())


@pytest.fixture(scope="session")
def default_extract_model(default_base):
    ad = random_adapter(default_base.config, "extract", 2, role=Role.EXTRACT)
    return merge_adapter(default_base, ad, Role.EXTRACT)


@pytest.fixture
def small_registry():
    return SchemaRegistry(
        [
            Schema("person", "ENTITY", "person", "A named human.", (("name", "full name"),)),
            Schema("organization", "ENTITY", "organization", "A company or institute.", (("name", ""),)),
            Schema("award", "EVENT", "award", "Someone receives a prize.", (("winner", ""), ("prize", ""))),
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
