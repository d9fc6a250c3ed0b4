import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_config():
    from adaptalign.model import ModelConfig

    # small enough for straight-line oracles and finite differences
    return ModelConfig.toy(image_size=8, patch_size=4, vision_dim=8, vision_depth=1, vision_heads=2,
                           vocab_size=16, text_dim=8, text_depth=1, text_heads=2, max_tokens=16,
                           decoder_dim=8, decoder_heads=2, global_dim=8, local_dim=8)


def randomize_adapters(model, std=0.3, seed=1):
    """Give every trainable parameter a generic nonzero value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in model.trainable_parameters():
            if p.dim() == 0:
                continue
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
