"""The training micro-batch."""

from dataclasses import dataclass, fields

import numpy as np

PAD_ID = 0
UNK_ID = 1
CLS_ID = BOS_ID = 2
SEP_ID = EOS_ID = 3
MASK_ID = 4
NUM_RESERVED = 5


@dataclass
class Batch:
    """One micro-batch; only the fields the model's modules consume are set.

    Integer fields are int64 arrays; ``mlm_labels`` holds -1 at unmasked
    positions. Positions are implicit (0..T-1).
    """

    token_ids: np.ndarray = None
    seg_ids: np.ndarray = None
    pad_mask: np.ndarray = None
    mlm_labels: np.ndarray = None
    sp_labels: np.ndarray = None
    cls_labels: np.ndarray = None
    images: np.ndarray = None
    patch_mask: np.ndarray = None
    audio: np.ndarray = None
    audio_lens: np.ndarray = None
    tgt_ids: np.ndarray = None
    prefix_len: np.ndarray = None

    def present(self):
        return tuple(f.name for f in fields(self) if getattr(self, f.name) is not None)

    @property
    def size(self):
        for name in ("token_ids", "images", "audio", "tgt_ids"):
            value = getattr(self, name)
            if value is not None:
                return len(value)
        return 0

    def text_mask(self):
        if self.pad_mask is not None:
            return np.asarray(self.pad_mask, dtype=np.float64)
        return (np.asarray(self.token_ids) != PAD_ID).astype(np.float64)

    def tgt_mask(self):
        return (np.asarray(self.tgt_ids) != PAD_ID).astype(np.float64)

    def select(self, rows):
        """Sub-batch of the given row indices."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = None if value is None else np.asarray(value)[rows]
        return Batch(**out)
