import numpy as np

from modpretrain import autograd as ag
from modpretrain.nn import ParamFactory


def factory(seed=0):
    return ParamFactory(np.random.default_rng(seed))


def randomize(store, seed=0, scale=0.5):
    """Replace small init values with O(1) draws so finite differences are well conditioned."""
    rng = np.random.default_rng(seed)
    for p in store.values():
        p.data[...] = rng.standard_normal(p.shape) * scale


def projection(shape, seed=0):
    return np.random.default_rng(seed + 1000).standard_normal(shape)


def projected_loss(fn, shape, seed=0):
    w = projection(shape, seed)
    return lambda: ag.tsum(ag.mul(fn(), w))


# gradients of composed modules have entries near 1e-8 where difference
# round-off (~1e-11) is no longer negligible
MODULE_FLOOR = 1e-6
