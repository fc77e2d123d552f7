import numpy as np
import pytest

from crossprompt import ContinualPromptTuner, StreamConfig, generate_stream

SMALL = dict(n_tasks=2, samples_per_task=40, m=4, d_v=8, s_max=6, vocab=24)


@pytest.fixture(scope="session")
def small_stream():
    return generate_stream(StreamConfig(**SMALL))


@pytest.fixture(scope="session")
def small_model(small_stream):
    est = ContinualPromptTuner(prompt_len=2, hidden=8, n_heads=2, model_dim=16, decoder_heads=2, epochs=3, seed=1)
    return est.fit(small_stream)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
