"""End-to-end checks that exercise a small but complete model."""

from __future__ import annotations

import numpy as np

from .gradcheck import GradcheckReport, gradcheck
from .stream import StreamConfig, generate_stream, stack_samples
from .trainer import ContinualPromptTuner

GRADCHECK_STREAM = StreamConfig(
    n_tasks=1, samples_per_task=10, m=4, d_v=8, s_max=6, vocab=16, n_intents=2, n_fillers=2, n_answers=3
)


def model_gradcheck(
    seed: int = 0,
    prompt_len: int = 2,
    hidden: int = 8,
    d: int = 16,
    batch_size: int = 2,
    generator_mode: str = "segment",
    cross_attention: bool = True,
    tol: float = 1e-5,
    max_entries: int | None = None,
) -> GradcheckReport:
    """Finite-difference check of every generator and projector parameter.

    The loss is the answer NLL of the frozen decoder on a small random batch,
    in training mode with a fixed dropout mask.
    """
    cfg = StreamConfig(**{**GRADCHECK_STREAM.to_dict(), "seed": seed})
    task = generate_stream(cfg)[0]
    est = ContinualPromptTuner(
        prompt_len=prompt_len,
        hidden=hidden,
        n_heads=2,
        model_dim=d,
        decoder_heads=2,
        dropout=0.1,
        generator_mode=generator_mode,
        cross_attention=cross_attention,
        seed=seed,
    )
    est._setup(cfg)
    gen = est.new_generator(0)
    batch = stack_samples(task.train[:batch_size])

    def loss_fn():
        gen.reseed_dropout(seed)
        return est.batch_loss(gen, batch, train_mode=True)

    params = [*gen.params, *est.projector_.params]
    return gradcheck(loss_fn, params, tol=tol, max_entries=max_entries, seed=seed)
