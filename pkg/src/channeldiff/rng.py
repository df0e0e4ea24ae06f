"""Deterministic RNG stream derivation.

Every random draw in an experiment comes from a stream addressed by
(base_seed, trial_index, substream_label).  Streams are derived through a
counter-based Philox generator keyed by the full address, so adding new
substream labels or trials never perturbs draws from existing ones.
"""

import numpy as np

# Fixed label codes; append only, never renumber.
SUBSTREAMS = {
    "source": 0,
    "channel": 1,
    "noise": 2,
    "sampler": 3,
}


def stream(base_seed: int, trial: int = 0, substream: str = "source") -> np.random.Generator:
    """Return the generator for one (seed, trial, substream) address."""
    code = SUBSTREAMS[substream]
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(trial), code))
    return np.random.Generator(np.random.Philox(ss))


def complex_normal(rng: np.random.Generator, size, scale: float = 1.0) -> np.ndarray:
    """Draw circularly-symmetric complex Gaussians, E|z|^2 = scale**2."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) * (scale / np.sqrt(2.0))
