"""scikit-learn style wrappers over text models.

``TextPretrainer`` pre-trains a configuration on raw documents and exposes
pooled features through ``transform``; ``TextClassifier`` replaces the target
with a classification head and fine-tunes it.
"""

import copy
import json

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .batch import CLS_ID, SEP_ID, Batch
from .composer import build, config_from_dict, replace_target, validate
from .data import Dataset, Examples, build_vocab, pad_rows, read_corpus, tokenize
from .errors import ValidationFailed
from .pooling import pool
from .trainer import TrainConfig, pretrain
from .validation import check_labels, check_texts

DEFAULT_CONFIG = {"embedding": ["word", "pos", "seg"], "encoder": "transformer", "target": ["mlm", "sp"]}


def _config(spec, vocab_size, hyper):
    raw = copy.deepcopy(spec)
    if isinstance(raw, str):
        with open(raw, encoding="utf-8") as fh:
            raw = json.load(fh)
    raw["hyper"] = {**raw.get("hyper", {}), **(hyper or {}), "vocab_size": vocab_size}
    config = config_from_dict(raw)
    errors = [d for d in validate(config) if d.severity == "error"]
    if errors:
        raise ValidationFailed(errors)
    return config


def _encode(vocab, texts, max_len):
    rows = [[CLS_ID] + vocab.encode(tokenize(t)) + [SEP_ID] for t in texts]
    return [r[:max_len] for r in rows]


class TextPretrainer(TransformerMixin, BaseEstimator):
    """Pre-train a word-content configuration on documents.

    ``transform`` returns [n, H] pooled encoder states.
    """

    def __init__(self, config=None, hyper=None, steps=100, lr=5e-3, batch_size=32, warmup_steps=10,
                 max_vocab=None, pooling="mean", seed=0):
        self.config = config
        self.hyper = hyper
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.max_vocab = max_vocab
        self.pooling = pooling
        self.seed = seed

    def fit(self, X, y=None):
        docs = read_corpus(check_texts(X))
        if len(docs) < 2:
            raise ValueError("pre-training needs at least 2 non-empty documents")
        self.vocab_ = build_vocab(docs, self.max_vocab)
        self.config_ = _config(self.config or DEFAULT_CONFIG, len(self.vocab_), self.hyper)
        self.model_ = build(self.config_, self.seed)
        examples = Examples(text=[self.vocab_.encode(tokenize(d)) for d in docs])
        stream = Dataset(self.vocab_, examples, docs).stream(self.config_, self.batch_size, self.seed)
        cfg = TrainConfig(lr=self.lr, total_steps=self.steps, warmup_steps=min(self.warmup_steps, self.steps),
                          batch_size=self.batch_size, seed=self.seed)
        self.report_, _ = pretrain(self.model_, stream, cfg)
        self.model_.eval()
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        rows = _encode(self.vocab_, check_texts(X), self.config_.hyper["max_seq_len"])
        ids = pad_rows(rows)
        batch = Batch(token_ids=ids, pad_mask=(ids != 0).astype(np.float64))
        with ag.no_grad():
            hidden, mask = self.model_.hidden_states(batch)
            return pool(hidden, mask, self.pooling).data.copy()


class TextClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tune a classification head (and the encoder below it).

    ``pretrained`` is an optional fitted :class:`TextPretrainer`; its model
    is copied, so fitting never mutates it.
    """

    def __init__(self, pretrained=None, config=None, hyper=None, steps=100, lr=1e-3, batch_size=16,
                 pooling="first", freeze=False, seed=0):
        self.pretrained = pretrained
        self.config = config
        self.hyper = hyper
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.pooling = pooling
        self.freeze = freeze
        self.seed = seed

    def fit(self, X, y):
        texts = check_texts(X)
        y = check_labels(y, len(texts))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.pretrained is not None:
            check_is_fitted(self.pretrained, "model_")
            self.vocab_ = self.pretrained.vocab_
            base = copy.deepcopy(self.pretrained.model_)
        else:
            self.vocab_ = build_vocab(texts)
            base = build(_config(self.config or DEFAULT_CONFIG, len(self.vocab_), self.hyper), self.seed)
        model = replace_target(base, ["cls"], num_classes=max(2, len(self.classes_)), seed=self.seed,
                               pooling=self.pooling)
        examples = Examples(text=[self.vocab_.encode(tokenize(t)) for t in texts], labels=encoded)
        stream = Dataset(self.vocab_, examples).stream(model.config, self.batch_size, self.seed)
        cfg = TrainConfig(lr=self.lr, total_steps=self.steps, warmup_steps=min(10, self.steps),
                          batch_size=self.batch_size, seed=self.seed)
        frozen = {n for n in model.params if not n.startswith("target.")} if self.freeze else ()
        self.report_, _ = pretrain(model, stream, cfg, frozen=frozen)
        model.eval()
        self.model_ = model
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        ids = pad_rows(_encode(self.vocab_, check_texts(X), self.model_.config.hyper["max_seq_len"]))
        batch = Batch(token_ids=ids, pad_mask=(ids != 0).astype(np.float64))
        with ag.no_grad():
            logits = self.model_.class_logits(batch).data
        logits = logits[:, :len(self.classes_)]
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
