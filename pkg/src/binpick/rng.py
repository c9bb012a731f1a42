"""Named random substreams derived from one master seed.

Every consumer asks for ``(stream name, indices...)``; two runs that share
the master seed and indices see identical draws regardless of what other
streams consumed, which is what paired strategy comparisons rely on.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"scene": 1, "noise": 2, "sync": 3, "sweep": 4, "strategy": 5, "grasp": 6}


def subseed(master: int, stream: str, *indices: int) -> int:
    ss = np.random.SeedSequence([int(master), STREAMS[stream], *(int(i) for i in indices)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def substream(master: int, stream: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng([int(master), STREAMS[stream], *(int(i) for i in indices)])
