"""Embedding component: modality inputs to a [B, T, H] matrix.

A stack holds exactly one *content* module (word, patch, speech or
word_patch) plus optional auxiliary position/segment modules. Parts are added
and the sum passes through layer norm and dropout.

Sequence length T per content kind:

* word: T = number of token ids (padding included, masked)
* patch: T = 1 + (Himg / P) * (Wimg / P) (CLS token first)
* speech: T = ceil(Tfr / 4)
* word_patch: T = Tt + 1 + (Himg / P) * (Wimg / P)
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (
    IndivisibleImage,
    MissingBatchField,
    SequenceTooLong,
    SequenceTooShort,
    ShapeMismatch,
    UnknownModule,
)
from .nn import LayerNorm, RunContext

CONTENT_KINDS = ("word", "patch", "speech", "word_patch")
AUX_KINDS = ("pos", "seg")
EMBEDDING_KINDS = CONTENT_KINDS + AUX_KINDS
ALIASES = {"patch_word": "word_patch"}
PAD_ID = 0


def canonical_kind(name):
    return ALIASES.get(name, name)


@dataclass
class EmbeddingSpec:
    kinds: tuple
    hidden: int
    vocab_size: int = 100
    max_seq_len: int = 64
    n_segments: int = 2
    patch_size: int = 8
    image_channels: int = 3
    audio_feat_dim: int = 16
    dropout_p: float = 0.1

    def __post_init__(self):
        self.kinds = tuple(canonical_kind(k) for k in self.kinds)
        for k in self.kinds:
            if k not in EMBEDDING_KINDS:
                raise UnknownModule(k, "embedding")
        content = [k for k in self.kinds if k in CONTENT_KINDS]
        if len(content) != 1:
            raise ValueError(f"embedding needs exactly one content kind, got {content}")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError(f"duplicate embedding kinds in {self.kinds}")

    @property
    def content(self):
        return next(k for k in self.kinds if k in CONTENT_KINDS)


@dataclass
class EmbeddingOutput:
    hidden: Tensor
    attention_mask: np.ndarray


# -- functional forms ------------------------------------------------------------

def word_embed(ids, table):
    """[B, T] integer ids -> [B, T, H] rows of ``table``."""
    return ag.embedding_lookup(table, ids)


def pos_embed(length, table):
    """Learned absolute positions 0..length-1 as [1, T, H]."""
    limit = table.shape[0]
    if length > limit:
        raise SequenceTooLong(length, limit)
    return ag.reshape(ag.getitem(table, slice(0, length)), (1, length, table.shape[1]))


def seg_embed(segments, table):
    return ag.embedding_lookup(table, segments)


def extract_patches(image, patch):
    """[B, C, Himg, Wimg] -> [B, N, C*P*P] with patches in row-major order."""
    image = ag.as_tensor(image)
    b, c, height, width = image.shape
    if height % patch or width % patch:
        raise IndivisibleImage(height, width, patch)
    gh, gw = height // patch, width // patch
    x = ag.reshape(image, (b, c, gh, patch, gw, patch))
    x = ag.transpose(x, (0, 2, 4, 1, 3, 5))
    return ag.reshape(x, (b, gh * gw, c * patch * patch))


def patch_embed(image, proj, cls_token, patch, bias=None, patch_mask=None, mask_token=None):
    """Project non-overlapping patches and prepend the CLS token.

    ``patch_mask`` ([B, N] booleans) swaps the selected patch embeddings for
    ``mask_token``; used by masked image modelling.
    """
    patches = ag.linear(extract_patches(image, patch), proj, bias)
    b, n, h = patches.shape
    if patch_mask is not None:
        keep = (~np.asarray(patch_mask, dtype=bool)).astype(np.float64)[..., None]
        patches = ag.add(ag.mul(patches, keep), ag.mul(ag.reshape(mask_token, (1, 1, h)), 1.0 - keep))
    cls = ag.add(ag.reshape(cls_token, (1, 1, h)), np.zeros((b, 1, h)))
    return ag.concat([cls, patches], axis=1)


def subsampled_length(frames):
    """Length after two stride-2, kernel-3, padding-1 convolutions: ceil(Tfr/4)."""
    half = -(-frames // 2)
    return -(-half // 2)


def speech_embed(frames, conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b):
    """[B, Tfr, F] -> [B, ceil(Tfr/4), H]."""
    frames = ag.as_tensor(frames)
    if frames.shape[1] < 4:
        raise SequenceTooShort(f"speech embedding needs at least 4 frames, got {frames.shape[1]}")
    x = ag.gelu(ag.conv1d(frames, conv1_w, conv1_b, stride=2, padding=1))
    x = ag.conv1d(x, conv2_w, conv2_b, stride=2, padding=1)
    return ag.linear(x, proj_w, proj_b)


def combine(parts, gain, bias, dropout_p=0.0, ctx=None):
    """Sum the parts (broadcasting [1, T, H] ones), then layer norm and dropout."""
    total = parts[0]
    for part in parts[1:]:
        if part.shape[1:] != total.shape[1:]:
            raise ShapeMismatch(f"combine: part {part.shape} vs {total.shape}")
        total = ag.add(total, part)
    out = ag.layer_norm(total, gain, bias)
    ctx = ctx or RunContext()
    return ag.dropout(out, dropout_p, ctx.rng, ctx.training)


# -- modules ----------------------------------------------------------------------

class EmbeddingStack:
    """All embedding modules of one component, e.g. ``["word", "pos", "seg"]``."""

    def __init__(self, spec, factory, component="embedding", with_mask_token=False):
        self.spec = spec
        self.component = component
        h = spec.hidden
        kind = spec.content
        sc = factory.scope(component, kind)
        # creation order is canonical (content, pos, seg) so listing order never matters
        self.word_table = None
        if kind in ("word", "word_patch"):
            self.word_table = sc.normal(0, "table", (spec.vocab_size, h))
        if kind in ("patch", "word_patch"):
            cpp = spec.image_channels * spec.patch_size ** 2
            self.patch_proj = sc.normal(0, "proj_weight", (cpp, h))
            self.patch_bias = sc.zeros(0, "proj_bias", (h,))
            self.cls_token = sc.normal(0, "cls_token", (h,))
            self.mask_token = sc.normal(0, "mask_token", (h,)) if with_mask_token else None
        if kind == "speech":
            f = spec.audio_feat_dim
            self.conv1_w = sc.normal(0, "conv_weight", (3, f, h))
            self.conv1_b = sc.zeros(0, "conv_bias", (h,))
            self.conv2_w = sc.normal(1, "conv_weight", (3, h, h))
            self.conv2_b = sc.zeros(1, "conv_bias", (h,))
            self.proj_w = sc.normal(2, "proj_weight", (h, h))
            self.proj_b = sc.zeros(2, "proj_bias", (h,))
        self.pos_table = None
        self.seg_table = None
        if "pos" in spec.kinds:
            self.pos_table = factory.scope(component, "pos").normal(0, "table", (spec.max_seq_len, h))
        if "seg" in spec.kinds:
            self.seg_table = factory.scope(component, "seg").normal(0, "table", (spec.n_segments, h))
        self.norm = LayerNorm(factory.scope(component, "combine"), 0, "ln", h)

    @property
    def needs(self):
        """Input fields consumed by the content module."""
        return {
            "word": ("ids",),
            "patch": ("images",),
            "speech": ("audio",),
            "word_patch": ("ids", "images"),
        }[self.spec.content]

    def _text(self, ids, pad_mask):
        if ids is None:
            raise MissingBatchField(self.spec.content, "token_ids")
        ids = np.asarray(ids)
        mask = (ids != PAD_ID) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        return word_embed(ids, self.word_table), mask.astype(np.float64)

    def _image(self, images, patch_mask):
        if images is None:
            raise MissingBatchField(self.spec.content, "images")
        hidden = patch_embed(images, self.patch_proj, self.cls_token, self.spec.patch_size,
                             bias=self.patch_bias, patch_mask=patch_mask, mask_token=self.mask_token)
        return hidden, np.ones(hidden.shape[:2])

    def _pos(self, lengths):
        parts = [pos_embed(n, self.pos_table) for n in lengths]
        return parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)

    def forward(self, ctx=None, ids=None, pad_mask=None, seg_ids=None, images=None,
                patch_mask=None, audio=None, audio_lens=None):
        kind = self.spec.content
        lengths = None
        default_seg = None
        if kind == "word":
            content, mask = self._text(ids, pad_mask)
        elif kind == "patch":
            content, mask = self._image(images, patch_mask)
        elif kind == "speech":
            if audio is None:
                raise MissingBatchField(kind, "audio")
            audio = np.asarray(audio, dtype=np.float64)
            content = speech_embed(audio, self.conv1_w, self.conv1_b, self.conv2_w,
                                   self.conv2_b, self.proj_w, self.proj_b)
            t = content.shape[1]
            lens = np.full(audio.shape[0], audio.shape[1]) if audio_lens is None else np.asarray(audio_lens)
            mask = (np.arange(t)[None, :] < subsampled_length(lens)[:, None]).astype(np.float64)
        else:
            text, text_mask = self._text(ids, pad_mask)
            image, image_mask = self._image(images, patch_mask)
            content = ag.concat([text, image], axis=1)
            mask = np.concatenate([text_mask, image_mask], axis=1)
            lengths = (text.shape[1], image.shape[1])
            default_seg = np.concatenate(
                [np.zeros(text_mask.shape, dtype=np.int64), np.ones(image_mask.shape, dtype=np.int64)], axis=1)
        b, t, _ = content.shape
        parts = [content]
        if self.pos_table is not None:
            parts.append(self._pos(lengths or (t,)))
        if self.seg_table is not None:
            segments = default_seg
            if segments is None:
                segments = np.zeros((b, t), dtype=np.int64) if seg_ids is None else np.asarray(seg_ids)
            parts.append(seg_embed(segments, self.seg_table))
        hidden = combine(parts, self.norm.gain, self.norm.bias, self.spec.dropout_p, ctx)
        return EmbeddingOutput(hidden, mask)
