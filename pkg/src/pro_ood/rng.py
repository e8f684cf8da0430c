"""Counter-based random streams, so every draw is a pure function of (seed, stream)."""

import numpy as np

_MASK128 = (1 << 128) - 1


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator keyed on ``seed`` whose counter's top word is ``stream``.

    Distinct streams start 2**192 blocks apart, so they never overlap in
    practice.
    """
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK128, counter=[0, 0, 0, int(stream)]))
