"""Named random substreams derived from a single run seed."""

import numpy as np

_STREAMS = {"init": 1, "shuffle": 2, "noise": 3, "bias": 4, "augment": 5, "split": 6}


def substream(seed, name, *keys):
    """Independent generator for ``name``; identical for identical ``seed``.

    Extra integer ``keys`` (e.g. an epoch number) select further
    independent children of the same stream.
    """
    return np.random.default_rng([int(seed), _STREAMS[name], *(int(k) for k in keys)])
