"""Target component: pre-training objectives mapping hidden states to losses.

Every loss is a mean over its valid predictions, so tasks combined in a
multi-task target have comparable scales.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import (
    BatchTooSmall,
    DirectionUnavailable,
    IdOutOfRange,
    NoMaskedPositions,
    NoValidTargets,
    SequenceTooShort,
    UnknownModule,
)
from .nn import LayerNorm, Linear

TARGET_KINDS = ("mlm", "lm", "bilm", "sp", "cls", "clr")
IGNORE_INDEX = -1
CLR_INIT_TEMPERATURE = 0.07
CLR_MIN_TEMPERATURE = 1e-3


@dataclass
class TargetSpec:
    kinds: tuple
    loss_weights: dict = field(default_factory=dict)
    num_classes: int = 2
    temperature: float = CLR_INIT_TEMPERATURE

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if not self.kinds:
            raise ValueError("target needs at least one kind")
        for k in self.kinds:
            if k not in TARGET_KINDS:
                raise UnknownModule(k, "target")
        self.loss_weights = {k: float(self.loss_weights.get(k, 1.0)) for k in self.kinds}


@dataclass
class TaskResult:
    loss: ag.Tensor
    correct: int
    count: int


@dataclass
class TargetOutput:
    loss: ag.Tensor
    per_task: dict


def cross_entropy(logits, labels):
    """Mean cross-entropy of [N, C] logits against [N] integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels.min() if labels.min() < 0 else labels.max()
        raise IdOutOfRange(int(bad), c)
    picked = ag.gather_last(ag.log_softmax(logits), labels)
    loss = ag.scale(ag.tsum(picked), -1.0 / n)
    correct = int((np.argmax(logits.data, axis=-1) == labels).sum())
    return TaskResult(loss, correct, n)


class VocabHead:
    """Projection to vocabulary logits, optionally tied to an embedding table
    ([V, H], used transposed) and optionally preceded by the dense + gelu +
    layer-norm transform used for masked prediction."""

    def __init__(self, scope, hidden, vocab_size, tied_table=None, transform=False):
        self.transform = Linear(scope, 0, "transform", hidden, hidden) if transform else None
        self.norm = LayerNorm(scope, 0, "ln", hidden) if transform else None
        self.tied_table = tied_table
        self.out_weight = None if tied_table is not None else scope.normal(0, "out_weight", (hidden, vocab_size))
        self.out_bias = scope.zeros(0, "out_bias", (vocab_size,))

    def __call__(self, hidden):
        if self.transform is not None:
            hidden = self.norm(ag.gelu(self.transform(hidden)))
        weight = ag.transpose(self.tied_table) if self.tied_table is not None else self.out_weight
        return ag.add(ag.matmul(hidden, weight), self.out_bias)


def _select_rows(hidden, mask):
    rows = np.nonzero(mask)
    return ag.getitem(hidden, rows)


def mlm_loss(hidden, mlm_labels, head):
    """Cross-entropy at positions whose label is not -1."""
    labels = np.asarray(mlm_labels, dtype=np.int64)
    selected = labels != IGNORE_INDEX
    if not selected.any():
        raise NoMaskedPositions("batch has no masked positions")
    return cross_entropy(head(_select_rows(hidden, selected)), labels[selected])


def lm_loss(hidden, ids, pad_mask, head):
    """hidden[:, t] predicts ids[:, t+1] wherever that next token is not padding."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[1] < 2:
        raise SequenceTooShort("lm needs sequences of length >= 2")
    valid = np.asarray(pad_mask, dtype=bool)[:, 1:]
    if not valid.any():
        raise NoValidTargets("every next-token target is padding")
    states = ag.getitem(hidden, (slice(None), slice(0, -1)))
    return cross_entropy(head(_select_rows(states, valid)), ids[:, 1:][valid])


def bilm_loss(hidden_fwd, hidden_bwd, ids, pad_mask, head):
    """Forward states predict the next token, backward states the previous;
    the loss is the mean of the two directions' cross-entropies."""
    if hidden_fwd is None or hidden_bwd is None:
        raise DirectionUnavailable("bilm needs a bilstm encoder exposing both directions")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[1] < 2:
        raise SequenceTooShort("bilm needs sequences of length >= 2")
    mask = np.asarray(pad_mask, dtype=bool)
    fwd_valid = mask[:, 1:] & mask[:, :-1]
    bwd_valid = mask[:, :-1] & mask[:, 1:]
    if not fwd_valid.any():
        raise NoValidTargets("no adjacent non-pad token pairs")
    fwd = cross_entropy(head(_select_rows(ag.getitem(hidden_fwd, (slice(None), slice(0, -1))), fwd_valid)),
                        ids[:, 1:][fwd_valid])
    bwd = cross_entropy(head(_select_rows(ag.getitem(hidden_bwd, (slice(None), slice(1, None))), bwd_valid)),
                        ids[:, :-1][bwd_valid])
    loss = ag.scale(ag.add(fwd.loss, bwd.loss), 0.5)
    return TaskResult(loss, fwd.correct + bwd.correct, fwd.count + bwd.count)


def sp_or_cls_loss(pooled, labels, head):
    """Cross-entropy of a single dense head over the pooled vectors [B, D]."""
    return cross_entropy(head(pooled), labels)


def clr_temperature(log_temp):
    """Learnable temperature exp(log_temp), clamped from below."""
    return ag.exp(ag.maximum(log_temp, np.log(CLR_MIN_TEMPERATURE)))


def clr_loss(z0, z1, temperature):
    """Symmetric in-batch InfoNCE between paired rows of z0 and z1 [B, D].

    ``temperature`` is a positive float or a one-element tensor.
    """
    b = z0.shape[0]
    if b < 2:
        raise BatchTooSmall("contrastive loss needs at least 2 pairs")
    sims = ag.matmul(ag.l2_normalize(z0), ag.transpose(ag.l2_normalize(z1)))
    if isinstance(temperature, ag.Tensor):
        logits = ag.div(sims, temperature)
    else:
        logits = ag.scale(sims, 1.0 / float(temperature))
    diag = np.arange(b)
    rows = cross_entropy(logits, diag)
    cols = cross_entropy(ag.transpose(logits), diag)
    loss = ag.scale(ag.add(rows.loss, cols.loss), 0.5)
    return TaskResult(loss, rows.correct + cols.correct, 2 * b)


def multi_target(outputs, weights=None):
    """Weighted sum of per-task losses; per-task (loss, correct, count) kept."""
    weights = weights or {}
    total = None
    per_task = {}
    for kind, result in outputs.items():
        w = float(weights.get(kind, 1.0))
        term = ag.scale(result.loss, w)
        total = term if total is None else ag.add(total, term)
        per_task[kind] = (result.loss.item(), result.correct, result.count)
    return TargetOutput(total, per_task)


class TargetStack:
    """Heads for every kind of one target spec.

    ``word_table`` is the embedding table that mlm / lm / bilm heads tie to
    (None means an untied output matrix).
    """

    def __init__(self, spec, factory, hidden, vocab_size, word_table=None, lm_table=None,
                 proj_dim=None, component="target", tie=True):
        self.spec = spec
        self.heads = {}
        for kind in spec.kinds:
            scope = factory.scope(component, kind)
            if kind == "mlm":
                self.heads[kind] = VocabHead(scope, hidden, vocab_size, word_table if tie else None, transform=True)
            elif kind in ("lm", "bilm"):
                table = lm_table if kind == "lm" else word_table
                self.heads[kind] = VocabHead(scope, hidden, vocab_size, table if tie else None)
            elif kind == "sp":
                self.heads[kind] = Linear(scope, 0, "head", hidden, 2)
            elif kind == "cls":
                self.heads[kind] = Linear(scope, 0, "head", hidden, spec.num_classes)
            else:
                self.heads[kind] = scope.constant(0, "log_temp", np.log(spec.temperature))

    @property
    def needs_pooled(self):
        return any(k in ("sp", "cls") for k in self.spec.kinds)
