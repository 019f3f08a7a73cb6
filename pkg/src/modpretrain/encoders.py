"""Encoder component: transformer (three masking modes, pre/post norm),
recurrent encoders, a residual CNN, and the dual-stream wrapper."""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import MissingPrefixLen, ShapeMismatch, UnknownModule
from .nn import FeedForward, LayerNorm, Linear, MultiHeadAttention
from .pooling import pool

ENCODER_KINDS = ("transformer", "lstm", "bilstm", "gru", "cnn")
RECURRENT_KINDS = ("lstm", "bilstm", "gru")
MASK_MODES = ("fully_visible", "causal", "prefix")
NORM_PLACEMENTS = ("pre", "post")


@dataclass
class EncoderSpec:
    kind: str
    layers: int = 2
    hidden: int = 32
    heads: int = 4
    ffn_hidden: int = None
    mask_mode: str = "fully_visible"
    norm_placement: str = "post"
    kernel_size: int = 3

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise UnknownModule(self.kind, "encoder")
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.hidden
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.kind == "transformer" and self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ValueError(f"unknown norm placement {self.norm_placement!r}")
        if self.kind == "cnn" and self.kernel_size % 2 == 0:
            raise ValueError("cnn kernel size must be odd")


def build_visibility(mask, mask_mode="fully_visible", prefix_len=None):
    """Pairwise {0,1} visibility [B, Tq, Tk] from a [B, T] padding mask.

    fully_visible: every real position sees every real position.
    causal: query t sees keys at positions <= t.
    prefix: keys before ``prefix_len`` are visible to every query; the rest
    is causal, so the prefix attends bidirectionally within itself.
    """
    mask = np.asarray(mask, dtype=np.float64)
    b, t = mask.shape
    pad = mask[:, :, None] * mask[:, None, :]
    if mask_mode == "fully_visible":
        return pad
    lower = np.tril(np.ones((t, t)))
    if mask_mode == "causal":
        return pad * lower
    if mask_mode == "prefix":
        if prefix_len is None:
            raise MissingPrefixLen("prefix masking needs prefix_len")
        prefix_len = np.broadcast_to(np.asarray(prefix_len), (b,))
        in_prefix = np.arange(t)[None, None, :] < prefix_len[:, None, None]
        return pad * np.maximum(lower[None], in_prefix)
    raise ValueError(f"unknown mask mode {mask_mode!r}")


class TransformerBlock:
    def __init__(self, scope, layer, spec):
        self.post = spec.norm_placement == "post"
        self.attn = MultiHeadAttention(scope, layer, "attn", spec.hidden, spec.heads)
        self.ln1 = LayerNorm(scope, layer, "ln1", spec.hidden)
        self.ffn = FeedForward(scope, layer, spec.hidden, spec.ffn_hidden)
        self.ln2 = LayerNorm(scope, layer, "ln2", spec.hidden)

    def __call__(self, h, visibility):
        if self.post:
            h = self.ln1(ag.add(h, self.attn(h, h, visibility)))
            return self.ln2(ag.add(h, self.ffn(h)))
        x = self.ln1(h)
        h = ag.add(h, self.attn(x, x, visibility))
        return ag.add(h, self.ffn(self.ln2(h)))


class TransformerEncoder:
    def __init__(self, spec, factory, component="encoder"):
        self.spec = spec
        scope = factory.scope(component, "transformer")
        self.blocks = [TransformerBlock(scope, i, spec) for i in range(spec.layers)]
        # pre-norm stacks end with a final layer norm, indexed one past the last block
        self.final = None if spec.norm_placement == "post" else LayerNorm(scope, spec.layers, "final_ln", spec.hidden)

    def forward(self, h, mask, prefix_len=None):
        if h.ndim != 3 or h.shape[-1] != self.spec.hidden:
            raise ShapeMismatch(f"transformer expects [B, T, {self.spec.hidden}], got {h.shape}")
        visibility = build_visibility(mask, self.spec.mask_mode, prefix_len)
        for block in self.blocks:
            h = block(h, visibility)
        return h if self.final is None else self.final(h)


def transformer_forward(h, mask, encoder, prefix_len=None):
    return encoder.forward(h, mask, prefix_len)


# -- recurrent -------------------------------------------------------------------

class LSTMCell:
    def __init__(self, scope, layer, prefix, n_in, hidden):
        self.hidden = hidden
        self.w_ih = scope.normal(layer, f"{prefix}w_ih", (n_in, 4 * hidden))
        self.w_hh = scope.normal(layer, f"{prefix}w_hh", (hidden, 4 * hidden))
        self.bias = scope.zeros(layer, f"{prefix}bias", (4 * hidden,))

    def run(self, x, reverse=False, h0=None):
        """Unroll over T; returns [B, T, H] aligned with the input positions."""
        b, t, _ = x.shape
        n = self.hidden
        projected = ag.add(ag.matmul(x, self.w_ih), self.bias)
        h = ag.Tensor(np.zeros((b, n))) if h0 is None else h0
        c = ag.Tensor(np.zeros((b, n)))
        outputs = [None] * t
        for step in (range(t - 1, -1, -1) if reverse else range(t)):
            z = ag.add(ag.getitem(projected, (slice(None), step)), ag.matmul(h, self.w_hh))
            i = ag.sigmoid(z[:, :n])
            f = ag.sigmoid(z[:, n:2 * n])
            g = ag.tanh(z[:, 2 * n:3 * n])
            o = ag.sigmoid(z[:, 3 * n:])
            c = ag.add(ag.mul(f, c), ag.mul(i, g))
            h = ag.mul(o, ag.tanh(c))
            outputs[step] = h
        return ag.stack(outputs, axis=1)


class GRUCell:
    def __init__(self, scope, layer, prefix, n_in, hidden):
        self.hidden = hidden
        self.w_ih = scope.normal(layer, f"{prefix}w_ih", (n_in, 3 * hidden))
        self.w_hh = scope.normal(layer, f"{prefix}w_hh", (hidden, 3 * hidden))
        self.bias = scope.zeros(layer, f"{prefix}bias", (3 * hidden,))

    def run(self, x, reverse=False, h0=None):
        b, t, _ = x.shape
        n = self.hidden
        projected = ag.add(ag.matmul(x, self.w_ih), self.bias)
        u_rz = self.w_hh[:, :2 * n]
        u_n = self.w_hh[:, 2 * n:]
        h = ag.Tensor(np.zeros((b, n))) if h0 is None else h0
        outputs = [None] * t
        for step in (range(t - 1, -1, -1) if reverse else range(t)):
            xt = ag.getitem(projected, (slice(None), step))
            rz = ag.sigmoid(ag.add(xt[:, :2 * n], ag.matmul(h, u_rz)))
            r, z = rz[:, :n], rz[:, n:]
            cand = ag.tanh(ag.add(xt[:, 2 * n:], ag.mul(r, ag.matmul(h, u_n))))
            h = ag.add(ag.mul(ag.sub(1.0, z), cand), ag.mul(z, h))
            outputs[step] = h
        return ag.stack(outputs, axis=1)


class RecurrentEncoder:
    """Stacked lstm / gru / bilstm.

    Padded positions are zeroed before entry; there is no sequence packing,
    so the backward direction of a bilstm steps through trailing pads first.
    """

    def __init__(self, spec, factory, component="encoder"):
        if spec.kind not in RECURRENT_KINDS:
            raise UnknownModule(spec.kind, "recurrent encoder")
        self.spec = spec
        scope = factory.scope(component, spec.kind)
        h = spec.hidden
        cell = GRUCell if spec.kind == "gru" else LSTMCell
        self.layers = []
        for i in range(spec.layers):
            if spec.kind == "bilstm":
                self.layers.append((LSTMCell(scope, i, "fwd_", h, h), LSTMCell(scope, i, "bwd_", h, h),
                                    Linear(scope, i, "proj", 2 * h, h)))
            else:
                self.layers.append((cell(scope, i, "", h, h),))

    def forward_with_directions(self, h, mask):
        """Returns (output, forward states, backward states); the direction
        states come from the last layer and are None unless bilstm."""
        h = ag.mul(h, np.asarray(mask, dtype=np.float64)[..., None])
        fwd = bwd = None
        for layer in self.layers:
            if len(layer) == 3:
                fwd = layer[0].run(h)
                bwd = layer[1].run(h, reverse=True)
                h = layer[2](ag.concat([fwd, bwd], axis=-1))
            else:
                h = layer[0].run(h)
        return h, fwd, bwd

    def forward(self, h, mask, prefix_len=None):
        return self.forward_with_directions(h, mask)[0]


def recurrent_forward(h, mask, encoder):
    return encoder.forward(h, mask)


class CnnEncoder:
    """Stacked same-padded 1-d convolutions, each ``h + gelu(conv(h))``.

    Pads are zeroed on entry only; at later layers the kernel window can carry
    information from a pad position's (non-zero) state into its neighbours.
    """

    def __init__(self, spec, factory, component="encoder"):
        self.spec = spec
        scope = factory.scope(component, "cnn")
        k, h = spec.kernel_size, spec.hidden
        self.convs = [(scope.normal(i, "conv_weight", (k, h, h)), scope.zeros(i, "conv_bias", (h,)))
                      for i in range(spec.layers)]

    def forward(self, h, mask, prefix_len=None):
        h = ag.mul(h, np.asarray(mask, dtype=np.float64)[..., None])
        pad = self.spec.kernel_size // 2
        for weight, bias in self.convs:
            h = ag.add(h, ag.gelu(ag.conv1d(h, weight, bias, stride=1, padding=pad)))
        return h


def cnn_forward(h, mask, encoder):
    return encoder.forward(h, mask)


def build_encoder(spec, factory, component="encoder"):
    if spec.kind == "transformer":
        return TransformerEncoder(spec, factory, component)
    if spec.kind == "cnn":
        return CnnEncoder(spec, factory, component)
    return RecurrentEncoder(spec, factory, component)


# -- dual stream -----------------------------------------------------------------

class Stream:
    """One embed -> encode -> pool -> project pipeline."""

    def __init__(self, embedding, encoder, pooling, proj):
        self.embedding = embedding
        self.encoder = encoder
        self.pooling = pooling
        self.proj = proj

    def forward(self, inputs, ctx=None):
        inputs = dict(inputs)
        prefix_len = inputs.pop("prefix_len", None)
        emb = self.embedding.forward(ctx, **inputs)
        hidden = self.encoder.forward(emb.hidden, emb.attention_mask, prefix_len)
        return ag.matmul(pool(hidden, emb.attention_mask, self.pooling), self.proj)


def dual_stream_forward(inputs_0, inputs_1, streams, ctx=None):
    """Run both streams independently; returns ([B, D], [B, D])."""
    return streams[0].forward(inputs_0, ctx), streams[1].forward(inputs_1, ctx)
