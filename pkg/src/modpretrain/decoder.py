"""Optional target-embedding and decoder components for sequence generation."""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .encoders import LSTMCell, GRUCell, build_visibility
from .errors import NoDecoder, ShapeMismatch, UnknownModule
from .nn import FeedForward, LayerNorm, MultiHeadAttention
from .pooling import pool

DECODER_KINDS = ("transformer", "lstm", "gru")
BOS_ID = 2
EOS_ID = 3
PAD_ID = 0


@dataclass
class DecoderSpec:
    kind: str = "transformer"
    layers: int = 2
    hidden: int = 32
    heads: int = 4
    ffn_hidden: int = None
    norm_placement: str = "post"
    tie_target_embedding_to_output: bool = True

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise UnknownModule(self.kind, "decoder")
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.hidden


class DecoderBlock:
    def __init__(self, scope, layer, spec):
        self.post = spec.norm_placement == "post"
        self.self_attn = MultiHeadAttention(scope, layer, "self", spec.hidden, spec.heads)
        self.ln1 = LayerNorm(scope, layer, "ln1", spec.hidden)
        self.cross_attn = MultiHeadAttention(scope, layer, "cross", spec.hidden, spec.heads)
        self.ln2 = LayerNorm(scope, layer, "ln2", spec.hidden)
        self.ffn = FeedForward(scope, layer, spec.hidden, spec.ffn_hidden)
        self.ln3 = LayerNorm(scope, layer, "ln3", spec.hidden)

    def __call__(self, h, memory, self_vis, cross_vis):
        if self.post:
            h = self.ln1(ag.add(h, self.self_attn(h, h, self_vis)))
            h = self.ln2(ag.add(h, self.cross_attn(h, memory, cross_vis)))
            return self.ln3(ag.add(h, self.ffn(h)))
        x = self.ln1(h)
        h = ag.add(h, self.self_attn(x, x, self_vis))
        h = ag.add(h, self.cross_attn(self.ln2(h), memory, cross_vis))
        return ag.add(h, self.ffn(self.ln3(h)))


class TransformerDecoder:
    """Per block: causal self-attention, cross-attention over the encoder
    memory, feed-forward; residual connections throughout."""

    def __init__(self, spec, factory, component="decoder"):
        self.spec = spec
        scope = factory.scope(component, "transformer")
        self.blocks = [DecoderBlock(scope, i, spec) for i in range(spec.layers)]
        self.final = None if spec.norm_placement == "post" else LayerNorm(scope, spec.layers, "final_ln", spec.hidden)

    def forward(self, h, tgt_mask, memory, memory_mask):
        if memory.shape[-1] != h.shape[-1] or memory.shape[0] != h.shape[0]:
            raise ShapeMismatch(f"decoder input {h.shape} vs memory {memory.shape}")
        tgt_mask = np.asarray(tgt_mask, dtype=np.float64)
        memory_mask = np.asarray(memory_mask, dtype=np.float64)
        self_vis = build_visibility(tgt_mask, "causal")
        cross_vis = tgt_mask[:, :, None] * memory_mask[:, None, :]
        for block in self.blocks:
            h = block(h, memory, self_vis, cross_vis)
        return h if self.final is None else self.final(h)


class RecurrentDecoder:
    """LSTM/GRU decoder whose initial hidden state is the masked mean of the
    encoder memory."""

    def __init__(self, spec, factory, component="decoder"):
        self.spec = spec
        scope = factory.scope(component, spec.kind)
        cell = LSTMCell if spec.kind == "lstm" else GRUCell
        self.cells = [cell(scope, i, "", spec.hidden, spec.hidden) for i in range(spec.layers)]

    def forward(self, h, tgt_mask, memory, memory_mask):
        if memory.shape[-1] != h.shape[-1]:
            raise ShapeMismatch(f"decoder input {h.shape} vs memory {memory.shape}")
        h0 = pool(memory, memory_mask, "mean")
        h = ag.mul(h, np.asarray(tgt_mask, dtype=np.float64)[..., None])
        for cell in self.cells:
            h = cell.run(h, h0=h0)
        return h


def build_decoder(spec, factory, component="decoder"):
    if spec.kind == "transformer":
        return TransformerDecoder(spec, factory, component)
    return RecurrentDecoder(spec, factory, component)


def decoder_forward(tgt_ids, memory, memory_mask, tgt_embedding, decoder, ctx=None):
    """Embed ``tgt_ids`` [B, Tt] with the target embedding and decode against
    ``memory`` [B, Ts, H]; returns [B, Tt, H]."""
    emb = tgt_embedding.forward(ctx, ids=tgt_ids)
    return decoder.forward(emb.hidden, emb.attention_mask, memory, memory_mask)


def greedy_generate(model, src_batch, max_len, bos_id=BOS_ID, eos_id=EOS_ID):
    """Argmax decoding; each row stops at ``eos_id`` (kept) or ``max_len``.

    Returns an int array [B, n] with n <= max_len, PAD after a row's EOS.
    The full prefix is re-decoded at every step.
    """
    if getattr(model, "decoder", None) is None:
        raise NoDecoder("model has no decoder component")
    with ag.no_grad():
        memory, memory_mask = model.encode(src_batch)
        b = memory.shape[0]
        prefix = np.full((b, 1), bos_id, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            logits = model.decode_logits(prefix, memory, memory_mask)
            step = np.argmax(logits.data[:, -1], axis=-1).astype(np.int64)
            step[done] = PAD_ID
            prefix = np.concatenate([prefix, step[:, None]], axis=1)
            done |= step == eos_id
            if done.all():
                break
    return prefix[:, 1:]
