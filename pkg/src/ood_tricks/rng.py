"""Counter-based random streams.

Every stochastic function in the package takes an explicit
``numpy.random.Generator``; nothing touches numpy's global state. Streams are
Philox generators keyed by a tuple of integers so that independent consumers
(epochs, batches, ensemble members) can be derived without coordination.
"""

import numpy as np


def make_rng(*keys) -> np.random.Generator:
    """Philox generator keyed by the given non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))
