"""Stateless 64-bit seed derivation.

Every stochastic choice in the pipeline (masking, decoy subsampling, shuffles,
window drops, init) draws from a generator seeded by mixing the run seed with
integer tags through splitmix64. Randomness is therefore a pure function of
(run_seed, tags), which is what makes checkpoint resume bitwise exact: the
only RNG state worth saving is the iteration counter.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

# stream tags; values are arbitrary but frozen
TAG_MASK = 1
TAG_CAP = 2
TAG_SHUFFLE = 3
TAG_DROP = 4
TAG_INIT = 5
TAG_SCENE = 6
TAG_GT_SUBSAMPLE = 7


def _splitmix64(z):
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix(*parts):
    """Fold integers into one 64-bit seed; order-sensitive."""
    h = 0
    for p in parts:
        h = _splitmix64((h ^ (int(p) & _MASK64)) & _MASK64)
    return h


def rng_for(*parts):
    return np.random.default_rng(mix(*parts))
