"""Input checks shared by the estimators and the command line."""

import numpy as np

from .errors import IdOutOfRange, MissingBatchField, ShapeMismatch


def required_fields(config):
    """Batch fields a configuration consumes, by module kind."""
    from .data import _content

    needed = set()
    stacks = [s.embedding for s in config.streams.values()] if config.is_dual_stream else [config.embedding]
    for kinds in stacks:
        content = _content(kinds)
        if content in ("word", "word_patch"):
            needed.add("token_ids")
        if content in ("patch", "word_patch"):
            needed.add("images")
        if content == "speech":
            needed.add("audio")
    for kind in config.target:
        needed.update({"mlm": ("mlm_labels",), "sp": ("sp_labels", "seg_ids"), "cls": ("cls_labels",)}.get(kind, ()))
        if kind == "lm" and config.decoder is not None:
            needed.add("tgt_ids")
    if not config.is_dual_stream and config.encoder_options.get("mask") == "prefix":
        needed.add("prefix_len")
    return needed


def check_batch(batch, config):
    """Raise if ``batch`` misses a field ``config`` needs or carries an
    out-of-range id; returns the batch."""
    for name in sorted(required_fields(config)):
        if getattr(batch, name) is None:
            raise MissingBatchField(name.split("_")[0], name)
    vocab = config.hyper["vocab_size"]
    for name in ("token_ids", "tgt_ids"):
        ids = getattr(batch, name)
        if ids is not None and np.size(ids):
            ids = np.asarray(ids)
            if ids.min() < 0 or ids.max() >= vocab:
                raise IdOutOfRange(int(ids.max() if ids.max() >= vocab else ids.min()), vocab)
    if batch.images is not None and np.ndim(batch.images) != 4:
        raise ShapeMismatch(f"images must be [B, C, H, W], got shape {np.shape(batch.images)}")
    if batch.audio is not None and np.ndim(batch.audio) != 3:
        raise ShapeMismatch(f"audio must be [B, T, F], got shape {np.shape(batch.audio)}")
    return batch


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ShapeMismatch(f"expected {n} labels, got shape {y.shape}")
    return y


def check_texts(X):
    """Non-empty sequence of strings, returned as a list."""
    if isinstance(X, str):
        raise TypeError("expected a sequence of strings, got a single string")
    texts = list(X)
    if not texts:
        raise ValueError("expected at least one text")
    bad = [type(t).__name__ for t in texts if not isinstance(t, str)]
    if bad:
        raise TypeError(f"texts must be str, got {bad[0]}")
    return texts
