"""Randomness plumbing: every stream derives from one run seed."""

from contextlib import contextmanager

import numpy as np
import torch

# stream tags keep derived generators apart
SOURCE_STREAM = 0
TARGET_STREAM = 1
SIDE_STREAM = 2
SAMPLER_STREAM = 3


def derived_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@contextmanager
def side_stream(seed: int, step: int):
    """Run a block (e.g. a target-batch forward with dropout) on a private
    torch RNG, leaving the global stream exactly where it was."""
    with torch.random.fork_rng(devices=[]):
        sub = np.random.SeedSequence([int(seed), SIDE_STREAM, int(step)]).generate_state(1)[0]
        torch.manual_seed(int(sub))
        yield
