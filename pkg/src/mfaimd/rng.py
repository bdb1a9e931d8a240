"""Counter-based random streams.

Every source of randomness in the package is a Philox generator keyed by
(seed, *path) where the path encodes what the stream drives, e.g.
(replica, class, channel).  Streams are therefore independent of scheduling:
any worker can recreate any stream from the indices alone, and two runs with
the same seed consume identical randomness no matter how replicas are
distributed.
"""

from __future__ import annotations

import numpy as np

# channel tags used in stream paths
CH_INIT = 0        # initial states / windows
CH_ACTIVATE = 1    # OFF -> ON candidates and marks
CH_LOSS = 2        # multiplicative-decrease candidates
CH_DEACTIVATE = 3  # ON -> OFF candidates
CH_EVENTS = 4      # merged event stream of the N-particle exact scheme
CH_EULER = 5       # per-step draws of the synchronous scheme
CH_STARTS = 6      # random restarts of fixed-point searches


def stream(seed: int, *path: int) -> np.random.Generator:
    """Dedicated generator for the given purpose path."""
    key = np.random.SeedSequence(int(seed), spawn_key=tuple(int(x) for x in path))
    return np.random.Generator(np.random.Philox(key))
