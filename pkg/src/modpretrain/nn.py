"""Parameter bookkeeping and the layers shared by several components.

Parameter names follow ``component.module.layer.role``: four dot-separated
fields, ``layer`` an integer. :func:`parse_param_name` inverts the scheme.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor

INIT_STD = 0.02
MASK_VALUE = -1e9


class ParamName(NamedTuple):
    component: str
    module: str
    layer: int
    role: str


def param_name(component, module, layer, role):
    for part in (component, module, role):
        if not part or "." in part:
            raise ValueError(f"invalid name part {part!r}")
    return f"{component}.{module}.{int(layer)}.{role}"


def parse_param_name(name):
    parts = name.split(".")
    if len(parts) != 4:
        raise ValueError(f"parameter name {name!r} is not component.module.layer.role")
    component, module, layer, role = parts
    return ParamName(component, module, int(layer), role)


def truncated_normal(rng, shape, std=INIT_STD, bound=2.0):
    """Normal(0, std) resampled until every draw lies within ``bound`` stds."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class ParamFactory:
    """Creates and registers every trainable tensor of one model build.

    Creation order is fixed by the build code, so a seed fully determines the
    initial values.
    """

    def __init__(self, rng, store=None):
        self.rng = rng
        self.store = {} if store is None else store

    def scope(self, component, module):
        return Scope(self, component, module)

    def add(self, name, data):
        if name in self.store:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.store[name] = t
        return t


class Scope:
    def __init__(self, factory, component, module):
        self.factory = factory
        self.component = component
        self.module = module

    def name(self, layer, role):
        return param_name(self.component, self.module, layer, role)

    def normal(self, layer, role, shape):
        return self.factory.add(self.name(layer, role), truncated_normal(self.factory.rng, shape))

    def zeros(self, layer, role, shape):
        return self.factory.add(self.name(layer, role), np.zeros(shape))

    def ones(self, layer, role, shape):
        return self.factory.add(self.name(layer, role), np.ones(shape))

    def constant(self, layer, role, value, shape=(1,)):
        return self.factory.add(self.name(layer, role), np.full(shape, float(value)))


@dataclass
class RunContext:
    """Mode flag plus the RNG used by dropout in training mode."""

    training: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


class LayerNorm:
    def __init__(self, scope, layer, prefix, hidden):
        self.gain = scope.ones(layer, f"{prefix}_gain", (hidden,))
        self.bias = scope.zeros(layer, f"{prefix}_bias", (hidden,))

    def __call__(self, x):
        return ag.layer_norm(x, self.gain, self.bias)


class Linear:
    def __init__(self, scope, layer, prefix, n_in, n_out, bias=True):
        self.weight = scope.normal(layer, f"{prefix}_weight", (n_in, n_out))
        self.bias = scope.zeros(layer, f"{prefix}_bias", (n_out,)) if bias else None

    def __call__(self, x):
        return ag.linear(x, self.weight, self.bias)


class FeedForward:
    def __init__(self, scope, layer, hidden, inner):
        self.up = Linear(scope, layer, "ffn_in", hidden, inner)
        self.down = Linear(scope, layer, "ffn_out", inner, hidden)

    def __call__(self, x):
        return self.down(ag.gelu(self.up(x)))


class MultiHeadAttention:
    """Scaled dot-product attention over ``heads`` heads.

    The key projection has no bias: a key bias shifts every logit of a query
    row by the same amount and so has an identically zero gradient.
    """

    def __init__(self, scope, layer, prefix, hidden, heads):
        if hidden % heads:
            raise ValueError(f"hidden {hidden} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(scope, layer, f"{prefix}_q", hidden, hidden)
        self.k = Linear(scope, layer, f"{prefix}_k", hidden, hidden, bias=False)
        self.v = Linear(scope, layer, f"{prefix}_v", hidden, hidden)
        self.o = Linear(scope, layer, f"{prefix}_o", hidden, hidden)

    def _split(self, x):
        b, t, h = x.shape
        return ag.transpose(ag.reshape(x, (b, t, self.heads, h // self.heads)), (0, 2, 1, 3))

    def __call__(self, x_q, x_kv, visibility):
        """``visibility`` is a {0,1} array [B, Tq, Tk]; 0 entries are masked.

        Query rows with no visible key get a zero context vector.
        """
        b, tq, h = x_q.shape
        q = self._split(self.q(x_q))
        k = self._split(self.k(x_kv))
        v = self._split(self.v(x_kv))
        logits = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / np.sqrt(h // self.heads))
        visibility = np.asarray(visibility, dtype=np.float64)
        logits = ag.add(logits, ((1.0 - visibility) * MASK_VALUE)[:, None])
        probs = ag.softmax(logits)
        live = visibility.any(axis=-1)
        if not live.all():
            probs = ag.mul(probs, live[:, None, :, None].astype(np.float64))
        context = ag.matmul(probs, v)
        context = ag.reshape(ag.transpose(context, (0, 2, 1, 3)), (b, tq, h))
        return self.o(context)
