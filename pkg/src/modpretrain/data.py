"""Tokenization, corpora, masking, sentence pairs, synthetic vision/audio
data, the binary array cache, and batch streams for any configuration."""

import json
import logging
import os
import queue
import re
import struct
import threading
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .batch import CLS_ID, EOS_ID, MASK_ID, NUM_RESERVED, PAD_ID, SEP_ID, UNK_ID, BOS_ID, Batch
from .embeddings import canonical_kind
from .errors import DataError, EmptyCorpus, NoMaskablePositions, TooFewDocuments

log = logging.getLogger(__name__)

RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
SENTENCE_END = re.compile(r"[.?!]")
AUDIO_SYMBOLS = 16
FRAMES_PER_SYMBOL = 8
CACHE_MAGIC = b"MPTDATA\x00"
CACHE_VERSION = 1
VISION_PATTERNS = ("horizontal", "vertical", "diagonal", "antidiagonal", "checkers", "coarse", "ring", "gradient")
COLOURS = {"red": (1.0, 0.2, 0.2), "green": (0.2, 1.0, 0.2), "blue": (0.2, 0.2, 1.0), "grey": (0.6, 0.6, 0.6)}


# -- vocabulary and corpora ----------------------------------------------------------

class Vocab:
    """Injective token <-> id map; ids 0..4 are reserved."""

    def __init__(self, tokens):
        self.itos = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def decode(self, ids, strip=True):
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD_ID, BOS_ID, EOS_ID):
                if i == EOS_ID:
                    break
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED_TOKENS[UNK_ID])
        return out

    def to_json(self):
        return json.dumps({"tokens": self.itos[NUM_RESERVED:]})

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text)["tokens"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def tokenize(text):
    """Lower-cased whitespace tokens; sentence punctuation is dropped."""
    return SENTENCE_END.sub(" ", text.lower()).split()


def split_sentences(line):
    return [s.lower().split() for s in SENTENCE_END.split(line) if s.strip()]


def read_corpus(source):
    """Documents (one per non-blank line) from a path or an iterable of lines."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    return [line.strip() for line in lines if line.strip()]


def build_vocab(corpus, max_size=None):
    """Frequency-sorted vocabulary, ties broken lexicographically.

    ``max_size`` counts the reserved ids; the rarest tokens beyond it are
    dropped and later map to UNK.
    """
    docs = read_corpus(corpus)
    counts = Counter(tok for doc in docs for tok in tokenize(doc))
    if not counts:
        raise EmptyCorpus("corpus has no tokens")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        if max_size < NUM_RESERVED:
            raise ValueError(f"max_size must be >= {NUM_RESERVED}")
        ordered = ordered[:max_size - NUM_RESERVED]
    return Vocab(ordered)


def toy_corpus():
    """The bundled 64-document toy corpus."""
    text = resources.files("modpretrain").joinpath("data/toy_corpus.txt").read_text(encoding="utf-8")
    return read_corpus(text.splitlines())


# -- masking and sentence pairs ------------------------------------------------------

def mask_for_mlm(ids, vocab_size, rng, p_select=0.15, mask_prob=0.8, random_prob=0.1):
    """Select each non-reserved position w.p. ``p_select``; corrupt selected
    positions 80/10/10 (MASK / random corpus token / unchanged).

    Returns (masked_ids, labels) with labels -1 at unselected positions.
    ``vocab_size`` may be a :class:`Vocab`.
    """
    if isinstance(vocab_size, Vocab):
        vocab_size = len(vocab_size)
    ids = np.asarray(ids, dtype=np.int64)
    maskable = ids >= NUM_RESERVED
    if not maskable.any():
        raise NoMaskablePositions("no non-reserved positions to mask")
    selected = maskable & (rng.random(ids.shape) < p_select)
    labels = np.where(selected, ids, -1)
    roll = rng.random(ids.shape)
    to_mask = selected & (roll < mask_prob)
    to_random = selected & (roll >= mask_prob) & (roll < mask_prob + random_prob)
    out = ids.copy()
    out[to_mask] = MASK_ID
    out[to_random] = rng.integers(NUM_RESERVED, vocab_size, size=int(to_random.sum()))
    return out, labels


def pair_ids(a, b, max_len=None):
    """CLS a SEP b SEP with segment 0 up to and including the first SEP."""
    if max_len is not None:
        budget = max_len - 3
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a = a[:-1]
            else:
                b = b[:-1]
    ids = [CLS_ID] + list(a) + [SEP_ID] + list(b) + [SEP_ID]
    seg = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return ids, seg


def make_sp_pairs(docs, vocab, rng, n_pairs, max_len=None):
    """Sentence pairs: label 0 = the second sentence follows the first in
    the same document, label 1 = it comes from a different document.

    Returns (ids rows, seg rows, labels). When no document has two sentences
    only negatives can be built; a warning is logged.
    """
    return draw_sp_pairs(sentence_table(docs, vocab), rng, n_pairs, max_len)


def sentence_table(docs, vocab):
    """Encoded sentences per document, plus the documents holding a next
    sentence. Warns when there are none."""
    sentences = [[vocab.encode(s) for s in split_sentences(d)] for d in read_corpus(docs)]
    sentences = [s for s in sentences if s]
    if len(sentences) < 2:
        raise TooFewDocuments("sentence pairs need at least 2 documents")
    with_next = [i for i, s in enumerate(sentences) if len(s) >= 2]
    if not with_next:
        log.warning("no document has two sentences; building negative pairs only")
    return sentences, with_next


def draw_sp_pairs(table, rng, n_pairs, max_len=None):
    sentences, with_next = table
    rows, segs, labels = [], [], []
    for _ in range(n_pairs):
        positive = bool(with_next) and rng.random() < 0.5
        if positive:
            d = with_next[rng.integers(len(with_next))]
            j = rng.integers(len(sentences[d]) - 1)
            a, b = sentences[d][j], sentences[d][j + 1]
        else:
            d = rng.integers(len(sentences))
            other = rng.integers(len(sentences) - 1)
            other += other >= d
            a = sentences[d][rng.integers(len(sentences[d]))]
            b = sentences[other][rng.integers(len(sentences[other]))]
        ids, seg = pair_ids(a, b, max_len)
        rows.append(ids)
        segs.append(seg)
        labels.append(0 if positive else 1)
    return rows, segs, np.asarray(labels, dtype=np.int64)


def pad_rows(rows, value=PAD_ID, length=None):
    length = max((len(r) for r in rows), default=0) if length is None else length
    out = np.full((len(rows), length), value, dtype=np.int64)
    for i, r in enumerate(rows):
        r = list(r)[:length]
        out[i, :len(r)] = r
    return out


# -- synthetic vision ----------------------------------------------------------------

def vision_pattern(kind, height, width):
    y, x = np.mgrid[0:height, 0:width]
    if kind == "horizontal":
        return (y // 2) % 2 * 1.0
    if kind == "vertical":
        return (x // 2) % 2 * 1.0
    if kind == "diagonal":
        return ((x + y) // 2) % 2 * 1.0
    if kind == "antidiagonal":
        return ((x - y) // 2) % 2 * 1.0
    if kind == "checkers":
        return ((x // 2) + (y // 2)) % 2 * 1.0
    if kind == "coarse":
        return ((x // 8) + (y // 8)) % 2 * 1.0
    if kind == "ring":
        r = np.hypot(y - (height - 1) / 2, x - (width - 1) / 2)
        return ((r // 3) % 2) * 1.0
    return x / max(width - 1, 1)


def synth_vision(n, classes, height=32, width=32, seed=0, channels=3, noise=0.1):
    """``n`` images [n, C, H, W] of class-specific patterns plus N(0, noise²)
    pixel noise; labels cycle through the classes."""
    if not 1 <= classes <= len(VISION_PATTERNS):
        raise ValueError(f"classes must be in [1, {len(VISION_PATTERNS)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes
    rng.shuffle(labels)
    templates = np.stack([vision_pattern(k, height, width) for k in VISION_PATTERNS[:classes]])
    images = np.repeat(templates[labels][:, None], channels, axis=1)
    images = images + rng.normal(0.0, noise, images.shape)
    return images, labels


def nearest_mean_classifier(train_x, train_y, test_x):
    """Hand-rule oracle: assign each image to the closest class-mean image."""
    classes = np.unique(train_y)
    means = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    flat = test_x.reshape(len(test_x), -1)
    dist = ((flat[:, None, :] - means.reshape(len(classes), -1)[None]) ** 2).sum(-1)
    return classes[np.argmin(dist, axis=1)]


def patch_tokens(images, patch, levels=8):
    """Visual token ids for masked image modelling: each patch's mean
    intensity quantised into ``levels`` buckets, offset past the reserved ids."""
    b, c, h, w = images.shape
    grid = images.reshape(b, c, h // patch, patch, w // patch, patch).mean(axis=(1, 3, 5))
    buckets = np.clip(np.floor(grid * levels), 0, levels - 1).astype(np.int64)
    return buckets.reshape(b, -1) + NUM_RESERVED


def synth_captioned_images(n, seed=0, height=32, width=32, channels=3, noise=0.05):
    """Image/caption pairs, one per (pattern, colour); captions are unique
    while n <= 32."""
    rng = np.random.default_rng(seed)
    combos = [(p, c) for c in COLOURS for p in VISION_PATTERNS]
    if n > len(combos):
        raise ValueError(f"at most {len(combos)} distinct captioned images")
    images = np.empty((n, channels, height, width))
    captions = []
    for i in range(n):
        p, c = combos[i]
        gains = np.resize(np.asarray(COLOURS[c]), channels)
        images[i] = gains[:, None, None] * vision_pattern(p, height, width)[None]
        captions.append(f"a {c} {p} picture")
    images = images + rng.normal(0.0, noise, images.shape)
    return images, captions


# -- synthetic audio -----------------------------------------------------------------

def audio_symbols():
    return [f"s{k}" for k in range(AUDIO_SYMBOLS)]


def audio_vocab():
    return Vocab(audio_symbols())


def audio_templates(feat_dim=16):
    """Orthonormal DCT-II rows, one frequency template per symbol."""
    if feat_dim < AUDIO_SYMBOLS:
        raise ValueError(f"audio_feat_dim must be >= {AUDIO_SYMBOLS}")
    f = np.arange(feat_dim)
    rows = [np.cos(np.pi * (f + 0.5) * k / feat_dim) for k in range(AUDIO_SYMBOLS)]
    return np.stack([r / np.linalg.norm(r) for r in rows])


def render_audio(symbols, rng, feat_dim=16, noise=0.3):
    templates = audio_templates(feat_dim)
    frames = np.repeat(templates[np.asarray(symbols, dtype=np.int64)], FRAMES_PER_SYMBOL, axis=0)
    return frames + rng.normal(0.0, noise / np.sqrt(feat_dim), frames.shape)


def synth_audio(n, vocab=None, seed=0, min_len=2, max_len=4, feat_dim=16, noise=0.3):
    """``n`` utterances: (frames [8 * len, F], transcript ids in ``vocab``).

    Each symbol of the transcript is 8 frames of its template plus noise.
    """
    vocab = vocab or audio_vocab()
    rng = np.random.default_rng(seed)
    symbol_ids = np.asarray(vocab.encode(audio_symbols()))
    out = []
    for _ in range(n):
        length = rng.integers(min_len, max_len + 1)
        symbols = rng.integers(0, AUDIO_SYMBOLS, size=length)
        out.append((render_audio(symbols, rng, feat_dim, noise), symbol_ids[symbols].tolist()))
    return out


def template_decode(frames, vocab=None, feat_dim=None):
    """Hand-rule oracle: average each 8-frame block, take the nearest template."""
    vocab = vocab or audio_vocab()
    frames = np.asarray(frames)
    templates = audio_templates(feat_dim or frames.shape[1])
    blocks = frames[: len(frames) // FRAMES_PER_SYMBOL * FRAMES_PER_SYMBOL]
    blocks = blocks.reshape(-1, FRAMES_PER_SYMBOL, frames.shape[1]).mean(axis=1)
    symbols = np.argmax(blocks @ templates.T, axis=1)
    return vocab.encode([audio_symbols()[s] for s in symbols])


# -- binary array cache and manifests -------------------------------------------------

def write_array(path, array):
    """8-byte magic, u16 version, u8 rank, u32 extents, little-endian f64 payload."""
    array = np.ascontiguousarray(array, dtype="<f8")
    header = CACHE_MAGIC + struct.pack("<HB", CACHE_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def read_array(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CACHE_MAGIC:
        raise DataError(f"{path}: not a data cache file")
    version, rank = struct.unpack_from("<HB", blob, 8)
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    offset = 11 + 4 * rank
    shape = struct.unpack_from(f"<{rank}I", blob, 11)
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != offset + 8 * count:
        raise DataError(f"{path}: truncated cache file")
    return np.frombuffer(blob, dtype="<f8", offset=offset, count=count).reshape(shape).astype(np.float64)


def load_manifest(path):
    """``{"format": ..., "<split>": "relative/path", ...}``; paths resolved
    against the manifest's directory."""
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(manifest, dict) or "format" not in manifest:
        raise DataError(f"manifest {path} needs a 'format' entry")
    base = os.path.dirname(os.path.abspath(path))
    out = {"format": manifest["format"]}
    for key, value in manifest.items():
        if key == "format":
            continue
        if isinstance(value, str):
            value = os.path.join(base, value)
            if not os.path.exists(value):
                raise DataError(f"manifest {path}: {key} file {value} does not exist")
        out[key] = value
    return out


# -- sources: examples for every configuration ----------------------------------------

@dataclass
class Examples:
    """Column store of raw examples; unused columns are None."""

    text: list = None
    text_b: list = None
    labels: np.ndarray = None
    images: np.ndarray = None
    audio: list = None
    target: list = None

    def __len__(self):
        for value in (self.text, self.images, self.audio, self.target):
            if value is not None:
                return len(value)
        return 0

    def subset(self, rows):
        out = {}
        for name in ("text", "text_b", "labels", "images", "audio", "target"):
            value = getattr(self, name)
            if value is None:
                out[name] = None
            elif isinstance(value, np.ndarray):
                out[name] = value[rows]
            else:
                out[name] = [value[i] for i in rows]
        return Examples(**out)


def _content(kinds):
    from .embeddings import CONTENT_KINDS
    return next(canonical_kind(k) for k in kinds if canonical_kind(k) in CONTENT_KINDS)


class BatchBuilder:
    """Turns rows of :class:`Examples` into a :class:`Batch` holding exactly
    the fields the configuration consumes."""

    def __init__(self, config, vocab_size, mlm_prob=0.15, patch_mask_prob=0.4):
        self.config = config
        self.vocab_size = vocab_size
        self.mlm_prob = mlm_prob
        self.patch_mask_prob = patch_mask_prob
        self.max_len = config.hyper["max_seq_len"]
        self.patch = config.hyper["patch_size"]

    def _text_ids(self, rows):
        seqs = [[CLS_ID] + list(r) + [SEP_ID] for r in rows]
        return pad_rows(seqs, length=min(self.max_len, max(len(s) for s in seqs)))

    def _mlm(self, ids, rng):
        # at least one selected position per batch so the loss is defined
        for _ in range(100):
            masked, labels = mask_for_mlm(ids, self.vocab_size, rng, self.mlm_prob)
            if (labels >= 0).any():
                return masked, labels
        raise NoMaskablePositions("masking selected nothing in 100 attempts")

    def build(self, ex, rng):
        cfg = self.config
        kinds = cfg.target
        batch = Batch()
        if cfg.is_dual_stream:
            for name in ("stream_0", "stream_1"):
                content = _content(cfg.streams[name].embedding)
                if content in ("word", "word_patch"):
                    batch.token_ids = self._text_ids(ex.text)
                if content in ("patch", "word_patch"):
                    batch.images = ex.images
                if content == "speech":
                    self._audio(batch, ex)
            return batch
        content = _content(cfg.embedding)
        if content in ("word", "word_patch"):
            if "sp" in kinds:
                ids, seg = zip(*(pair_ids(a, b, self.max_len) for a, b in zip(ex.text, ex.text_b)))
                batch.token_ids = pad_rows(ids)
                batch.seg_ids = pad_rows(seg, value=0, length=batch.token_ids.shape[1])
                batch.sp_labels = np.asarray(ex.labels, dtype=np.int64)
            else:
                batch.token_ids = self._text_ids(ex.text)
            batch.pad_mask = (batch.token_ids != PAD_ID).astype(np.float64)
            if "mlm" in kinds:
                batch.token_ids, batch.mlm_labels = self._mlm(batch.token_ids, rng)
        if content in ("patch", "word_patch"):
            batch.images = np.asarray(ex.images, dtype=np.float64)
            if "mlm" in kinds and content == "patch":
                tokens = patch_tokens(batch.images, self.patch)
                for _ in range(100):
                    mask = rng.random(tokens.shape) < self.patch_mask_prob
                    if mask.any():
                        break
                batch.patch_mask = mask
                labels = np.where(mask, tokens, -1)
                batch.mlm_labels = np.concatenate([np.full((len(tokens), 1), -1), labels], axis=1)
        if content == "speech":
            self._audio(batch, ex)
        if "cls" in kinds:
            batch.cls_labels = np.asarray(ex.labels, dtype=np.int64)
        if "lm" in kinds and cfg.decoder is not None:
            batch.tgt_ids = pad_rows([[BOS_ID] + list(t) + [EOS_ID] for t in ex.target])
        if cfg.encoder_options.get("mask") == "prefix":
            batch.prefix_len = np.asarray([min(len(t) + 2, batch.token_ids.shape[1]) // 2 for t in ex.text])
        return batch

    def _audio(self, batch, ex):
        lens = np.asarray([len(a) for a in ex.audio])
        feat = ex.audio[0].shape[1]
        frames = np.zeros((len(ex.audio), lens.max(), feat))
        for i, a in enumerate(ex.audio):
            frames[i, :len(a)] = a
        batch.audio = frames
        batch.audio_lens = lens


class DataStream:
    """Deterministic batch stream: ``stream(step)`` draws rows and corruption
    from ``default_rng([seed, step])``, so any step can be replayed exactly.

    ``sample(rng)`` draws a batch from an explicit generator (used by the
    threaded loader, one generator per producer).
    """

    def __init__(self, examples, builder, batch_size, seed=0, pairs=None):
        if len(examples) == 0:
            raise DataError("data stream has no examples")
        self.examples = examples
        self.builder = builder
        self.batch_size = batch_size if pairs is not None else min(batch_size, len(examples))
        self.seed = seed
        self.pairs = pairs

    def sample(self, rng):
        if self.pairs is not None:
            ex = self.pairs(rng, self.batch_size)
        else:
            rows = rng.choice(len(self.examples), size=self.batch_size, replace=False)
            ex = self.examples.subset(np.sort(rows))
        return self.builder.build(ex, rng)

    def __call__(self, step):
        return self.sample(np.random.default_rng([self.seed, step]))

    def full(self, seed=0):
        """Every example once, in order (evaluation)."""
        return self.builder.build(self.examples, np.random.default_rng([self.seed, seed, 99]))


def text_examples(docs, vocab):
    return Examples(text=[vocab.encode(tokenize(d)) for d in read_corpus(docs)])


def sp_pair_sampler(docs, vocab, max_len):
    """Fresh sentence pairs per batch from ``docs``."""
    table = sentence_table(docs, vocab)

    def draw(rng, n):
        rows, _, labels = draw_sp_pairs(table, rng, n)
        a, b = [], []
        for r in rows:
            first_sep = r.index(SEP_ID)
            a.append(r[1:first_sep])
            b.append(r[first_sep + 1:-1])
        return Examples(text=a, text_b=b, labels=labels)
    return draw


class Dataset:
    """A vocabulary, examples, and (optionally) a pair sampler for sp."""

    def __init__(self, vocab, examples, docs=None):
        self.vocab = vocab
        self.examples = examples
        self.docs = docs

    def stream(self, config, batch_size, seed=0, **builder_kw):
        builder = BatchBuilder(config, config.hyper["vocab_size"], **builder_kw)
        pairs = None
        if "sp" in config.target and not config.is_dual_stream:
            if self.docs is None:
                raise DataError("sp needs a document corpus")
            pairs = sp_pair_sampler(self.docs, self.vocab, config.hyper["max_seq_len"])
        return DataStream(self.examples, builder, batch_size, seed, pairs)


def toy_dataset(config, n=64, seed=0):
    """Synthetic data matching ``config``'s modalities and targets."""
    hyper = config.hyper
    size, channels = hyper["image_size"], hyper["image_channels"]
    classes = hyper["num_classes"]
    if config.is_dual_stream:
        contents = {_content(s.embedding) for s in config.streams.values()}
        if "speech" in contents:
            raise DataError("no toy data for dual-stream speech configurations")
        images, captions = synth_captioned_images(min(n, 32), seed, size, size, channels)
        vocab = build_vocab(captions, hyper["vocab_size"])
        return Dataset(vocab, Examples(text=[vocab.encode(tokenize(c)) for c in captions], images=images))
    content = _content(config.embedding)
    if content == "speech":
        vocab = audio_vocab()
        utts = synth_audio(n, vocab, seed, feat_dim=hyper["audio_feat_dim"])
        return Dataset(vocab, Examples(audio=[u[0] for u in utts], target=[u[1] for u in utts]))
    if content == "patch":
        images, labels = synth_vision(n, min(classes, len(VISION_PATTERNS)), size, size, seed, channels)
        return Dataset(None, Examples(images=images, labels=labels))
    if content == "word_patch":
        images, labels = synth_vision(n, min(classes, len(VISION_PATTERNS)), size, size, seed, channels)
        captions = [f"a {VISION_PATTERNS[y]} picture" for y in labels]
        vocab = build_vocab(captions, hyper["vocab_size"])
        return Dataset(vocab, Examples(text=[vocab.encode(tokenize(c)) for c in captions],
                                       images=images, labels=labels))
    docs = toy_corpus()
    vocab = build_vocab(docs, hyper["vocab_size"])
    examples = text_examples(docs, vocab)
    if config.decoder is not None:
        examples.target = [list(t) for t in examples.text]
    if "cls" in config.target:
        examples.labels = np.arange(len(docs), dtype=np.int64) % classes
    return Dataset(vocab, examples, docs)


def dataset_from_manifest(manifest, config, split="train"):
    """Load a split listed in a manifest.

    Formats: ``corpus`` (text, one document per line), ``labeled`` (label TAB
    text), ``pairs`` (source TAB target), ``vision`` / ``audio`` (cache files
    ``<split>`` for inputs and ``<split>_labels`` / ``<split>_targets``).
    """
    fmt = manifest["format"]
    if split not in manifest:
        raise DataError(f"manifest has no {split!r} split")
    path = manifest[split]
    hyper = config.hyper
    vocab_path = manifest.get("vocab")
    if fmt in ("corpus", "labeled", "pairs"):
        lines = read_corpus(path)
        if not lines:
            raise EmptyCorpus(f"{path} is empty")
        if fmt == "corpus":
            vocab = Vocab.load(vocab_path) if vocab_path else build_vocab(lines, hyper["vocab_size"])
            ex = text_examples(lines, vocab)
            if config.decoder is not None:
                ex.target = [list(t) for t in ex.text]
            return Dataset(vocab, ex, lines)
        try:
            left, right = zip(*(line.split("\t", 1) for line in lines))
        except ValueError:
            raise DataError(f"{path}: every line needs a TAB separator") from None
        if fmt == "labeled":
            vocab = Vocab.load(vocab_path) if vocab_path else build_vocab(right, hyper["vocab_size"])
            return Dataset(vocab, Examples(text=[vocab.encode(tokenize(t)) for t in right],
                                           labels=np.asarray([int(x) for x in left], dtype=np.int64)))
        vocab = Vocab.load(vocab_path) if vocab_path else build_vocab(left + right, hyper["vocab_size"])
        return Dataset(vocab, Examples(text=[vocab.encode(tokenize(t)) for t in left],
                                       target=[vocab.encode(tokenize(t)) for t in right]))
    if fmt == "vision":
        images = read_array(path)
        labels = read_array(manifest[f"{split}_labels"]).astype(np.int64)
        return Dataset(None, Examples(images=images, labels=labels))
    if fmt == "audio":
        frames = read_array(path)
        lens = read_array(manifest[f"{split}_lengths"]).astype(np.int64)
        targets = read_array(manifest[f"{split}_targets"]).astype(np.int64)
        vocab = audio_vocab()
        return Dataset(vocab, Examples(audio=[f[:n] for f, n in zip(frames, lens)],
                                       target=[[int(t) for t in row if t != PAD_ID] for row in targets]))
    raise DataError(f"unknown data format {fmt!r}")


# -- concurrent loading --------------------------------------------------------------

class ThreadedLoader:
    """Bounded-queue producer threads; producer k draws from its own
    generator ``default_rng([seed, k])``. Batches are reproducible per
    producer but their interleaving is not."""

    def __init__(self, stream, workers, seed=0, capacity=4):
        self.stream = stream
        self.queue = queue.Queue(maxsize=capacity)
        self.stop = threading.Event()
        self.threads = [threading.Thread(target=self._produce, args=(k, seed), daemon=True)
                        for k in range(workers)]
        for t in self.threads:
            t.start()

    def _produce(self, k, seed):
        rng = np.random.default_rng([seed, k])
        while not self.stop.is_set():
            try:
                item = (k, self.stream.sample(rng))
            except Exception as exc:  # handed to the consumer, which re-raises
                item = (k, exc)
            while not self.stop.is_set():
                try:
                    self.queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def __call__(self, step):
        item = self.queue.get()[1]
        if isinstance(item, Exception):
            self.close()
            raise item
        return item

    def close(self):
        self.stop.set()
        for t in self.threads:
            t.join(timeout=1.0)


def make_loader(stream, loaders=1, seed=0):
    """``loaders == 1`` returns the deterministic stream itself."""
    if loaders <= 1:
        return stream
    return ThreadedLoader(stream, loaders, seed)
