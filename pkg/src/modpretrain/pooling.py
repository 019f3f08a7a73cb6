"""Reduction of per-position hidden states to one vector per sequence."""

import numpy as np

from . import autograd as ag
from .errors import EmptySequence
from .nn import MASK_VALUE

POOLING_STRATEGIES = ("first", "mean", "max", "last")


def pool(hidden, mask, strategy="first"):
    """[B, T, H] hidden states and a [B, T] {0,1} mask -> [B, H].

    first: position 0. mean / max: over unmasked positions. last: the last
    unmasked position of each row.
    """
    if strategy not in POOLING_STRATEGIES:
        raise ValueError(f"unknown pooling strategy {strategy!r}")
    b, t, h = hidden.shape
    if t == 0:
        raise EmptySequence("cannot pool an empty sequence")
    mask = np.ones((b, t)) if mask is None else np.asarray(mask, dtype=np.float64)
    if strategy == "first":
        return ag.getitem(hidden, (slice(None), 0))
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise EmptySequence("a row has no unmasked positions")
    if strategy == "mean":
        summed = ag.tsum(ag.mul(hidden, mask[..., None]), axis=1)
        return ag.div(summed, counts[:, None])
    if strategy == "max":
        return ag.tmax(ag.add(hidden, ((1.0 - mask) * MASK_VALUE)[..., None]), axis=1)
    last = t - 1 - np.argmax(mask[:, ::-1] > 0, axis=1)
    return ag.getitem(hidden, (np.arange(b), last))
