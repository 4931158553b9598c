import numpy as np
import pytest

from ctxlab.model import ModelConfig, build_model


def tiny_config(**changes) -> ModelConfig:
    base = dict(vocab_size=257, d_model=16, n_heads=4, n_layers=2, d_ff=24, pretrained_ctx=16,
                target_ctx=32, attention="shift_short", group_size=8, lora_rank=2, seed=3)
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_adapters(model, seed=0, scale=0.05, dtype=np.float32):
    """Give every adapter a non-zero B so adapter gradients are informative."""
    g = np.random.default_rng(seed)
    for ad in model.adapters.values():
        ad.A.data = ad.A.data.astype(dtype)
        ad.B.data = g.normal(0, scale, size=ad.B.shape).astype(dtype)
    return model


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
