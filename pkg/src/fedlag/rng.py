"""Deterministic keyed random streams.

Every random draw in the simulator comes from a Philox counter-based bit
generator keyed on (seed, purpose, a, b). Streams are stateless: the same
key always yields the same sequence no matter when or in what order it is
opened, so nothing can depend on scheduling or call history.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_IDX_BITS = 24
_IDX_MAX = 1 << _IDX_BITS

# purpose tags keep unrelated streams disjoint even when (a, b) collide
INIT = 1       # model weights, keyed (seed, layer_id)
SHUFFLE = 2    # minibatch permutation, keyed (seed, epoch)
SAMPLE = 3     # client sampling, keyed (seed, round)
CLIENT = 4     # per-client local training, keyed (seed, client_id, round)
PARTITION = 5  # Dirichlet partition draws, keyed (seed, class, retry)
DOMAIN = 6     # toy domain placement, keyed (seed, domain)
BLOBS = 7      # Gaussian blob sampling, keyed (seed, class)
SPLIT = 8      # train/test split shuffles, keyed (seed, client_id, retry)


def stream(seed, purpose, a=0, b=0):
    """Open the generator for the (seed, purpose, a, b) stream."""
    if not (0 <= a < _IDX_MAX and 0 <= b < _IDX_MAX):
        raise ValueError(f"stream index out of range: a={a}, b={b}")
    key = np.array(
        [seed & _MASK64, (purpose << (2 * _IDX_BITS)) | (a << _IDX_BITS) | b],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed, purpose, a=0, b=0):
    """64-bit sub-seed for APIs that take a plain integer seed."""
    return int(stream(seed, purpose, a, b).integers(0, _MASK64 + 1, dtype=np.uint64))
