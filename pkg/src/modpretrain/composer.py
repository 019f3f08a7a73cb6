"""Configuration parsing, validation and model assembly.

A configuration names modules per component; the ``hyper`` block (optional,
defaults recorded) carries the sizes. Example::

    {
      "embedding": ["word", "pos", "seg"],
      "encoder": "transformer",
      "target": ["mlm", "sp"],
      "hyper": {"hidden": 32, "layers": 2, "heads": 4, "vocab_size": 100}
    }

Target compatibility (which batch fields / components each target needs):

======  ==========================================  ============================
target  model requirement                           batch fields
======  ==========================================  ============================
mlm     word / word_patch / patch content            mlm_labels (+patch_mask)
lm      decoder, or word content in the encoder      tgt_ids, or token_ids
bilm    bilstm encoder over word content             token_ids
sp      seg embedding over word content              seg_ids, sp_labels
cls     any single-stream model (pooled vector)      cls_labels
clr     stream_0 + stream_1 (dual-stream)            both streams' inputs
======  ==========================================  ============================
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .batch import PAD_ID
from .decoder import DECODER_KINDS, DecoderSpec, build_decoder
from .embeddings import CONTENT_KINDS, EMBEDDING_KINDS, EmbeddingSpec, EmbeddingStack, canonical_kind
from .encoders import (
    ENCODER_KINDS,
    MASK_MODES,
    NORM_PLACEMENTS,
    EncoderSpec,
    RecurrentEncoder,
    Stream,
    build_encoder,
)
from .errors import (
    IncompatiblePooling,
    MissingBatchField,
    ParseError,
    UnknownKey,
    UnknownModule,
    ValidationFailed,
)
from .nn import ParamFactory, RunContext, parse_param_name
from .pooling import POOLING_STRATEGIES, pool
from .targets import (
    TARGET_KINDS,
    TargetSpec,
    TargetStack,
    bilm_loss,
    clr_loss,
    clr_temperature,
    lm_loss,
    mlm_loss,
    multi_target,
    sp_or_cls_loss,
)

__all__ = [
    "ModelConfig", "StreamConfig", "Diagnostic", "ComposedModel", "parse_config", "load_config",
    "validate", "build", "pool", "replace_target", "HYPER_DEFAULTS",
]

TOP_LEVEL_KEYS = ("embedding", "encoder", "pooling", "tgt_embedding", "decoder", "target",
                  "stream_0", "stream_1", "loss_weights", "hyper")
STREAM_KEYS = ("embedding", "encoder", "pooling")
ENCODER_OPTION_KEYS = ("kind", "layers", "heads", "ffn_hidden", "mask", "norm", "kernel_size")
DECODER_OPTION_KEYS = ("kind", "layers", "heads", "ffn_hidden", "norm")
STREAM_NAMES = ("stream_0", "stream_1")

HYPER_DEFAULTS = {
    "hidden": 32,
    "layers": 2,
    "heads": 4,
    "ffn_hidden": None,
    "vocab_size": 100,
    "max_seq_len": 64,
    "n_segments": 2,
    "patch_size": 8,
    "image_channels": 3,
    "image_size": 32,
    "audio_feat_dim": 16,
    "num_classes": 2,
    "proj_dim": 16,
    "dropout": 0.1,
    "norm": "post",
    "tie_weights": True,
    "kernel_size": 3,
    "temperature": 0.07,
    "seed": 0,
}


@dataclass
class StreamConfig:
    embedding: list
    encoder: str
    encoder_options: dict = field(default_factory=dict)
    pooling: str = "first"


@dataclass
class ModelConfig:
    embedding: list = None
    encoder: str = None
    encoder_options: dict = field(default_factory=dict)
    pooling: str = None
    tgt_embedding: list = None
    decoder: str = None
    decoder_options: dict = field(default_factory=dict)
    target: list = field(default_factory=list)
    streams: dict = None
    loss_weights: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=lambda: dict(HYPER_DEFAULTS))
    defaults_filled: list = field(default_factory=list)

    @property
    def is_dual_stream(self):
        return bool(self.streams)

    @property
    def has_decoder(self):
        return self.decoder is not None

    def to_dict(self):
        """Canonical, fully explicit JSON-able form (defaults included)."""
        out = {
            "target": list(self.target),
            "loss_weights": dict(self.loss_weights),
            "hyper": dict(self.hyper),
        }
        if self.streams:
            for name, s in sorted(self.streams.items()):
                out[name] = {"embedding": list(s.embedding),
                             "encoder": dict(s.encoder_options, kind=s.encoder),
                             "pooling": s.pooling}
        else:
            out["embedding"] = list(self.embedding or [])
            out["encoder"] = dict(self.encoder_options, kind=self.encoder)
            if self.pooling is not None:
                out["pooling"] = self.pooling
        if self.tgt_embedding is not None:
            out["tgt_embedding"] = list(self.tgt_embedding)
        if self.decoder is not None:
            out["decoder"] = dict(self.decoder_options, kind=self.decoder)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def fingerprint(self):
        """32-byte SHA-256 of the canonical form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()


@dataclass
class Diagnostic:
    severity: str
    rule: str
    message: str
    keys: tuple = ()

    def to_dict(self):
        return {"severity": self.severity, "rule": self.rule, "message": self.message, "keys": list(self.keys)}


# -- parsing ---------------------------------------------------------------------

def _module_list(value, component):
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError(f"{component!r} must be a module name or a list of module names")
    return value


def _options(value, component, allowed, registry):
    if isinstance(value, str):
        value = {"kind": value}
    if not isinstance(value, dict) or not isinstance(value.get("kind"), str):
        raise ParseError(f"{component!r} must be a module name or an object with a 'kind'")
    for key in value:
        if key not in allowed:
            raise UnknownKey(f"{component}.{key}")
    if value["kind"] not in registry:
        raise UnknownModule(value["kind"], component)
    options = {k: v for k, v in value.items() if k != "kind"}
    return value["kind"], options


def _embedding_kinds(value, component):
    kinds = [canonical_kind(k) for k in _module_list(value, component)]
    for k in kinds:
        if k not in EMBEDDING_KINDS:
            raise UnknownModule(k, component)
    return kinds


def parse_config(text):
    """Parse a JSON configuration document into a :class:`ModelConfig`.

    Aliases are normalised (``patch_word`` -> ``word_patch``) and every
    default applied is listed in ``defaults_filled``.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    if not isinstance(raw, dict):
        raise ParseError("configuration must be a JSON object")
    return config_from_dict(raw)


def config_from_dict(raw):
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            raise UnknownKey(key)
    cfg = ModelConfig()
    filled = []

    hyper = raw.get("hyper", {})
    if not isinstance(hyper, dict):
        raise ParseError("'hyper' must be an object")
    for key in hyper:
        if key not in HYPER_DEFAULTS:
            raise UnknownKey(f"hyper.{key}")
    for key, default in HYPER_DEFAULTS.items():
        if key not in hyper:
            filled.append(f"hyper.{key}")
    cfg.hyper = {**HYPER_DEFAULTS, **hyper}

    if "target" not in raw:
        raise ParseError("configuration needs a 'target'")
    cfg.target = _module_list(raw["target"], "target")
    for k in cfg.target:
        if k not in TARGET_KINDS:
            raise UnknownModule(k, "target")

    streams = {name: raw[name] for name in STREAM_NAMES if name in raw}
    if streams:
        cfg.streams = {}
        for name, body in streams.items():
            if not isinstance(body, dict):
                raise ParseError(f"{name!r} must be an object")
            for key in body:
                if key not in STREAM_KEYS:
                    raise UnknownKey(f"{name}.{key}")
            if "embedding" not in body or "encoder" not in body:
                raise ParseError(f"{name!r} needs 'embedding' and 'encoder'")
            kind, options = _options(body["encoder"], f"{name}.encoder", ENCODER_OPTION_KEYS, ENCODER_KINDS)
            pooling = body.get("pooling")
            if pooling is None:
                pooling = "first"
                filled.append(f"{name}.pooling")
            cfg.streams[name] = StreamConfig(_embedding_kinds(body["embedding"], f"{name}.embedding"),
                                             kind, options, pooling)
    if "embedding" in raw:
        cfg.embedding = _embedding_kinds(raw["embedding"], "embedding")
    if "encoder" in raw:
        cfg.encoder, cfg.encoder_options = _options(raw["encoder"], "encoder", ENCODER_OPTION_KEYS, ENCODER_KINDS)
        if "mask" not in cfg.encoder_options and cfg.encoder == "transformer":
            lm_on_encoder = "lm" in cfg.target and "decoder" not in raw
            cfg.encoder_options["mask"] = "causal" if lm_on_encoder else "fully_visible"
            filled.append("encoder.mask")
    if "tgt_embedding" in raw:
        cfg.tgt_embedding = _embedding_kinds(raw["tgt_embedding"], "tgt_embedding")
    if "decoder" in raw:
        cfg.decoder, cfg.decoder_options = _options(raw["decoder"], "decoder", DECODER_OPTION_KEYS, DECODER_KINDS)
    if "pooling" in raw:
        cfg.pooling = raw["pooling"]
    elif not streams and any(k in ("sp", "cls") for k in cfg.target):
        cfg.pooling = "first"
        filled.append("pooling")

    weights = raw.get("loss_weights", {})
    if not isinstance(weights, dict):
        raise ParseError("'loss_weights' must be an object")
    cfg.loss_weights = {k: weights.get(k, 1.0) for k in cfg.target}
    for k in weights:
        if k not in cfg.target:
            cfg.loss_weights[k] = weights[k]
    filled.extend(f"loss_weights.{k}" for k in cfg.target if k not in weights)
    cfg.defaults_filled = filled
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- validation ------------------------------------------------------------------

def validate(config):
    """Return every :class:`Diagnostic` for ``config``; errors mean unbuildable.

    Never raises: malformed fields become diagnostics.
    """
    out = []

    def error(rule, message, *keys):
        out.append(Diagnostic("error", rule, message, keys))

    def warning(rule, message, *keys):
        out.append(Diagnostic("warning", rule, message, keys))

    try:
        _validate(config, error, warning)
    except Exception as exc:  # a malformed config must still produce a diagnostic
        error("CONFIG_MALFORMED", f"configuration could not be checked: {exc!r}")
    return out


def _is_str_list(value):
    return isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value)


def _check_embedding(kinds, where, error):
    if not _is_str_list(kinds) or not kinds:
        error("EMB_MISSING", f"{where} must be a non-empty list of module names", where)
        return None
    kinds = [canonical_kind(k) for k in kinds]
    unknown = [k for k in kinds if k not in EMBEDDING_KINDS]
    if unknown:
        error("EMB_UNKNOWN_MODULE", f"unknown embedding modules {unknown}", where)
        return None
    if len(set(kinds)) != len(kinds):
        error("EMB_DUPLICATE", f"{where} lists a module twice", where)
    content = [k for k in kinds if k in CONTENT_KINDS]
    if len(content) != 1:
        error("EMB_CONTENT_COUNT",
              f"{where} needs exactly one of {list(CONTENT_KINDS)}, got {content}", where)
        return None
    return content[0]


def _check_encoder(kind, options, where, hyper, error):
    if kind not in ENCODER_KINDS:
        error("ENC_UNKNOWN_MODULE", f"unknown encoder {kind!r}", where)
        return
    if not isinstance(options, dict):
        error("ENC_OPTIONS_MALFORMED", f"{where} options must be an object", where)
        return
    layers = options.get("layers", hyper.get("layers"))
    heads = options.get("heads", hyper.get("heads"))
    if not isinstance(layers, int) or layers < 1:
        error("ENC_LAYERS_POSITIVE", f"{where} needs layers >= 1, got {layers!r}", where)
    if kind == "transformer":
        hidden = hyper.get("hidden")
        if not isinstance(heads, int) or heads < 1 or not isinstance(hidden, int) or hidden % heads:
            error("ENC_HEADS_DIVIDE_HIDDEN", f"hidden {hidden!r} must be divisible by heads {heads!r}",
                  where, "hyper.hidden")
    mask = options.get("mask", "fully_visible")
    if mask not in MASK_MODES:
        error("ENC_MASK_UNKNOWN", f"unknown mask mode {mask!r}", f"{where}.mask")
    norm = options.get("norm", hyper.get("norm"))
    if norm not in NORM_PLACEMENTS:
        error("ENC_NORM_UNKNOWN", f"unknown norm placement {norm!r}", f"{where}.norm")
    if kind == "cnn":
        k = options.get("kernel_size", hyper.get("kernel_size"))
        if not isinstance(k, int) or k < 1 or k % 2 == 0:
            error("CNN_KERNEL_ODD", f"cnn kernel size must be a positive odd integer, got {k!r}", where)


def _validate(config, error, warning):
    hyper = config.hyper if isinstance(config.hyper, dict) else {}
    if not isinstance(config.hyper, dict):
        error("HYPER_MALFORMED", "hyper must be an object", "hyper")
    for key in ("hidden", "vocab_size", "max_seq_len", "n_segments", "patch_size", "image_channels",
                "image_size", "audio_feat_dim", "num_classes", "proj_dim"):
        value = hyper.get(key, HYPER_DEFAULTS[key])
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            error("HYPER_POSITIVE_INT", f"hyper.{key} must be a positive integer, got {value!r}", f"hyper.{key}")
    dropout = hyper.get("dropout", 0.0)
    if not isinstance(dropout, (int, float)) or not 0.0 <= dropout < 1.0:
        error("HYPER_DROPOUT_RANGE", f"hyper.dropout must lie in [0, 1), got {dropout!r}", "hyper.dropout")

    targets = config.target
    if not _is_str_list(targets) or not targets:
        error("TARGET_EMPTY", "target must be a non-empty list of module names", "target")
        targets = []
    unknown = [t for t in targets if t not in TARGET_KINDS]
    if unknown:
        error("TARGET_UNKNOWN_MODULE", f"unknown target modules {unknown}", "target")
    if len(set(targets)) != len(targets):
        error("TARGET_DUPLICATE", "target lists a module twice", "target")

    weights = config.loss_weights if isinstance(config.loss_weights, dict) else {}
    for kind, w in weights.items():
        if kind not in targets:
            error("LOSS_WEIGHT_UNKNOWN_TARGET", f"loss weight for {kind!r} which is not a target",
                  f"loss_weights.{kind}")
        elif not isinstance(w, (int, float)) or isinstance(w, bool) or not w > 0:
            error("LOSS_WEIGHT_NONPOSITIVE", f"loss weight for {kind!r} must be > 0, got {w!r}",
                  f"loss_weights.{kind}")

    if config.streams:
        if config.embedding is not None or config.encoder is not None:
            error("STREAMS_EXCLUSIVE", "dual-stream configs cannot also set top-level embedding/encoder",
                  "stream_0", "embedding")
        if not isinstance(config.streams, dict) or sorted(config.streams) != list(STREAM_NAMES):
            error("STREAM_INCOMPLETE", "a dual-stream config needs both stream_0 and stream_1", "stream_0", "stream_1")
        else:
            for name, s in sorted(config.streams.items()):
                _check_embedding(getattr(s, "embedding", None), f"{name}.embedding", error)
                _check_encoder(getattr(s, "encoder", None), getattr(s, "encoder_options", {}),
                               f"{name}.encoder", hyper, error)
                if getattr(s, "pooling", None) not in POOLING_STRATEGIES:
                    error("POOLING_UNKNOWN", f"unknown pooling {getattr(s, 'pooling', None)!r}", f"{name}.pooling")
        if "clr" not in targets:
            error("STREAMS_REQUIRE_CLR", "dual-stream encoders feed the clr target", "stream_0", "target")
        others = [t for t in targets if t != "clr"]
        if others:
            error("DUAL_STREAM_TARGETS", f"dual-stream models support only clr, got {others}", "target")
        if config.decoder is not None or config.tgt_embedding is not None:
            error("DUAL_STREAM_DECODER", "dual-stream models have no decoder", "decoder")
        return

    if "clr" in targets:
        error("CLR_REQUIRES_DUAL_STREAM", "clr needs stream_0 and stream_1", "target", "stream_0")
    content = None
    if config.embedding is None:
        error("EMB_MISSING", "configuration needs an embedding (or stream_0/stream_1)", "embedding")
    else:
        content = _check_embedding(config.embedding, "embedding", error)
    if config.encoder is None:
        error("ENC_MISSING", "configuration needs an encoder", "encoder")
    else:
        _check_encoder(config.encoder, config.encoder_options, "encoder", hyper, error)
    kinds = [canonical_kind(k) for k in config.embedding] if _is_str_list(config.embedding) else []

    if config.decoder is not None and config.tgt_embedding is None:
        error("DEC_REQUIRES_TGT_EMB", "a decoder needs a tgt_embedding", "decoder", "tgt_embedding")
    if config.tgt_embedding is not None and config.decoder is None:
        error("TGT_EMB_REQUIRES_DEC", "a tgt_embedding needs a decoder", "tgt_embedding", "decoder")
    if config.tgt_embedding is not None:
        tgt_content = _check_embedding(config.tgt_embedding, "tgt_embedding", error)
        if tgt_content is not None and tgt_content != "word":
            error("TGT_EMB_TEXT_ONLY", "tgt_embedding must be word-based", "tgt_embedding")
    if config.decoder is not None:
        if config.decoder not in DECODER_KINDS:
            error("DEC_UNKNOWN_MODULE", f"unknown decoder {config.decoder!r}", "decoder")
        if "lm" not in targets:
            error("DEC_REQUIRES_LM", "a decoder is trained through the lm target", "decoder", "target")

    if config.pooling is not None and config.pooling not in POOLING_STRATEGIES:
        error("POOLING_UNKNOWN", f"unknown pooling {config.pooling!r}", "pooling")

    if "sp" in targets:
        if "seg" not in kinds:
            error("SP_REQUIRES_SEG", "sp needs the seg embedding", "target", "embedding")
        if content not in (None, "word"):
            error("SP_REQUIRES_TEXT", "sp pairs are text pairs; use word content", "target", "embedding")
    if "mlm" in targets and content == "speech":
        error("MLM_UNSUPPORTED_CONTENT", "mlm has no token labels for speech input", "target", "embedding")
    if "lm" in targets and config.decoder is None:
        if content not in (None, "word"):
            error("LM_REQUIRES_TEXT", "lm without a decoder needs word content", "target", "embedding")
        mask = config.encoder_options.get("mask") if isinstance(config.encoder_options, dict) else None
        if config.encoder == "transformer" and mask == "fully_visible":
            warning("LM_NOT_CAUSAL", "lm over a fully-visible transformer sees its own targets",
                    "encoder.mask", "target")
    if "bilm" in targets:
        if config.encoder != "bilstm":
            error("BILM_REQUIRES_BILSTM", "bilm needs a bilstm encoder", "target", "encoder")
        if content not in (None, "word"):
            error("BILM_REQUIRES_TEXT", "bilm needs word content", "target", "embedding")
    if content in ("patch", "word_patch"):
        size, patch = hyper.get("image_size"), hyper.get("patch_size")
        if isinstance(size, int) and isinstance(patch, int) and patch > 0 and size % patch:
            error("PATCH_DIVIDES_IMAGE", f"image_size {size} not divisible by patch_size {patch}",
                  "hyper.image_size", "hyper.patch_size")


# -- the composed model --------------------------------------------------------------

def _embedding_spec(kinds, hyper):
    return EmbeddingSpec(
        kinds=tuple(kinds), hidden=hyper["hidden"], vocab_size=hyper["vocab_size"],
        max_seq_len=hyper["max_seq_len"], n_segments=hyper["n_segments"], patch_size=hyper["patch_size"],
        image_channels=hyper["image_channels"], audio_feat_dim=hyper["audio_feat_dim"],
        dropout_p=hyper["dropout"])


def _encoder_spec(kind, options, hyper):
    return EncoderSpec(
        kind=kind, layers=options.get("layers", hyper["layers"]), hidden=hyper["hidden"],
        heads=options.get("heads", hyper["heads"]), ffn_hidden=options.get("ffn_hidden", hyper["ffn_hidden"]),
        mask_mode=options.get("mask", "fully_visible"), norm_placement=options.get("norm", hyper["norm"]),
        kernel_size=options.get("kernel_size", hyper["kernel_size"]))


def _embedding_inputs(stack, batch):
    kind = stack.spec.content
    inputs = {}
    if kind in ("word", "word_patch"):
        if batch.token_ids is None:
            raise MissingBatchField(kind, "token_ids")
        inputs["ids"] = batch.token_ids
        inputs["pad_mask"] = batch.pad_mask
        if kind == "word":
            inputs["seg_ids"] = batch.seg_ids
    if kind in ("patch", "word_patch"):
        if batch.images is None:
            raise MissingBatchField(kind, "images")
        inputs["images"] = batch.images
        inputs["patch_mask"] = batch.patch_mask
    if kind == "speech":
        if batch.audio is None:
            raise MissingBatchField(kind, "audio")
        inputs["audio"] = batch.audio
        inputs["audio_lens"] = batch.audio_lens
    return inputs


def _require(batch, kind, *names):
    for name in names:
        if getattr(batch, name) is None:
            raise MissingBatchField(kind, name)


class ComposedModel:
    """Embedding -> encoder -> [target embedding -> decoder] -> pooling -> targets.

    ``params`` maps every trainable tensor's hierarchical name to the tensor;
    tied output matrices appear once, under their embedding name.
    """

    def __init__(self, config, seed=None):
        diagnostics = [d for d in validate(config) if d.severity == "error"]
        if diagnostics:
            raise ValidationFailed(diagnostics)
        self.config = config
        self.seed = config.hyper["seed"] if seed is None else seed
        hyper = config.hyper
        factory = ParamFactory(np.random.default_rng(self.seed))
        self.embedding = self.encoder = self.tgt_embedding = self.decoder = None
        self.streams = None
        self.pooling = config.pooling
        if config.is_dual_stream:
            self.streams = []
            for name in STREAM_NAMES:
                s = config.streams[name]
                emb = EmbeddingStack(_embedding_spec(s.embedding, hyper), factory, f"{name}_embedding")
                enc = build_encoder(_encoder_spec(s.encoder, s.encoder_options, hyper), factory, f"{name}_encoder")
                proj = factory.scope(f"{name}_proj", "linear").normal(0, "weight", (hyper["hidden"], hyper["proj_dim"]))
                self.streams.append(Stream(emb, enc, s.pooling, proj))
        else:
            content = [canonical_kind(k) for k in config.embedding if canonical_kind(k) in CONTENT_KINDS][0]
            self.embedding = EmbeddingStack(_embedding_spec(config.embedding, hyper), factory, "embedding",
                                            with_mask_token=(content == "patch" and "mlm" in config.target))
            self.encoder = build_encoder(_encoder_spec(config.encoder, config.encoder_options, hyper), factory)
            if config.decoder is not None:
                self.tgt_embedding = EmbeddingStack(_embedding_spec(config.tgt_embedding, hyper), factory,
                                                    "tgt_embedding")
                opts = config.decoder_options
                self.decoder = build_decoder(DecoderSpec(
                    kind=config.decoder, layers=opts.get("layers", hyper["layers"]), hidden=hyper["hidden"],
                    heads=opts.get("heads", hyper["heads"]), ffn_hidden=opts.get("ffn_hidden", hyper["ffn_hidden"]),
                    norm_placement=opts.get("norm", hyper["norm"]),
                    tie_target_embedding_to_output=hyper["tie_weights"]), factory)
        self.targets = self._build_targets(config, factory)
        self.params = factory.store
        self.training = True
        self.dropout_rng = np.random.default_rng([self.seed, 1])

    def _build_targets(self, config, factory):
        hyper = config.hyper
        spec = TargetSpec(tuple(config.target), dict(config.loss_weights), hyper["num_classes"],
                          hyper["temperature"])
        word_table = self.embedding.word_table if self.embedding is not None else None
        lm_table = self.tgt_embedding.word_table if self.tgt_embedding is not None else word_table
        return TargetStack(spec, factory, hyper["hidden"], hyper["vocab_size"], word_table=word_table,
                           lm_table=lm_table, tie=hyper["tie_weights"])

    # -- bookkeeping ---------------------------------------------------------------
    @property
    def pipeline(self):
        stages = []
        if self.streams:
            stages += [("stream_0", self.streams[0]), ("stream_1", self.streams[1])]
        else:
            stages += [("embedding", self.embedding), ("encoder", self.encoder)]
            if self.decoder is not None:
                stages += [("tgt_embedding", self.tgt_embedding), ("decoder", self.decoder)]
            if self.pooling is not None:
                stages.append(("pooling", self.pooling))
        stages.append(("target", self.targets))
        return stages

    @property
    def mode(self):
        return "train" if self.training else "eval"

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reseed_dropout(self, *key):
        """Dropout draws depend on ``key`` alone, so a restored model replays
        the run it came from whatever seed built it."""
        self.dropout_rng = np.random.default_rng(list(key))

    def context(self):
        return RunContext(self.training, self.dropout_rng)

    # -- forward pieces ------------------------------------------------------------
    def hidden_states(self, batch, ctx=None):
        """Encoder output [B, T, H] and its mask (single-stream models)."""
        ctx = ctx or self.context()
        emb = self.embedding.forward(ctx, **_embedding_inputs(self.embedding, batch))
        if self.encoder.spec.mask_mode == "prefix":
            _require(batch, "prefix mask", "prefix_len")
        hidden = self.encoder.forward(emb.hidden, emb.attention_mask, batch.prefix_len)
        return hidden, emb.attention_mask

    def encode(self, batch, ctx=None):
        return self.hidden_states(batch, ctx)

    def decode(self, tgt_ids, memory, memory_mask, ctx=None):
        ctx = ctx or self.context()
        emb = self.tgt_embedding.forward(ctx, ids=tgt_ids)
        return self.decoder.forward(emb.hidden, emb.attention_mask, memory, memory_mask)

    def decode_logits(self, tgt_ids, memory, memory_mask, ctx=None):
        return self.targets.heads["lm"](self.decode(tgt_ids, memory, memory_mask, ctx))

    def pooled(self, batch, ctx=None):
        """[B, H] pooled encoder output (single-stream) or ([B, D], [B, D])."""
        ctx = ctx or self.context()
        if self.streams:
            return self._stream_outputs(batch, ctx)
        hidden, mask = self.hidden_states(batch, ctx)
        return pool(hidden, mask, self.pooling or "first")

    def class_logits(self, batch, kind="cls", ctx=None):
        return self.targets.heads[kind](self.pooled(batch, ctx))

    def _stream_outputs(self, batch, ctx):
        return tuple(s.forward(_embedding_inputs(s.embedding, batch), ctx) for s in self.streams)

    def forward(self, batch, loss_weights=None, ctx=None):
        """All target losses for ``batch``, combined by :func:`multi_target`."""
        ctx = ctx or self.context()
        kinds = self.targets.spec.kinds
        heads = self.targets.heads
        results = {}
        if self.streams:
            z0, z1 = self._stream_outputs(batch, ctx)
            results["clr"] = clr_loss(z0, z1, clr_temperature(heads["clr"]))
        else:
            emb = self.embedding.forward(ctx, **_embedding_inputs(self.embedding, batch))
            if self.encoder.spec.mask_mode == "prefix":
                _require(batch, "prefix mask", "prefix_len")
            fwd = bwd = None
            if isinstance(self.encoder, RecurrentEncoder):
                hidden, fwd, bwd = self.encoder.forward_with_directions(emb.hidden, emb.attention_mask)
            else:
                hidden = self.encoder.forward(emb.hidden, emb.attention_mask, batch.prefix_len)
            mask = emb.attention_mask
            pooled = None
            for kind in kinds:
                if kind == "mlm":
                    _require(batch, kind, "mlm_labels")
                    labels = np.asarray(batch.mlm_labels)
                    if labels.shape[1] < hidden.shape[1]:
                        labels = np.pad(labels, ((0, 0), (0, hidden.shape[1] - labels.shape[1])),
                                        constant_values=-1)
                    results[kind] = mlm_loss(hidden, labels, heads[kind])
                elif kind == "lm":
                    if self.decoder is not None:
                        _require(batch, kind, "tgt_ids")
                        dec = self.decode(batch.tgt_ids, hidden, mask, ctx)
                        results[kind] = lm_loss(dec, batch.tgt_ids, batch.tgt_mask(), heads[kind])
                    else:
                        _require(batch, kind, "token_ids")
                        results[kind] = lm_loss(hidden, batch.token_ids, mask, heads[kind])
                elif kind == "bilm":
                    _require(batch, kind, "token_ids")
                    results[kind] = bilm_loss(fwd, bwd, batch.token_ids, mask, heads[kind])
                else:
                    field_name = "sp_labels" if kind == "sp" else "cls_labels"
                    _require(batch, kind, field_name)
                    if pooled is None:
                        pooled = pool(hidden, mask, self.pooling or "first")
                    results[kind] = sp_or_cls_loss(pooled, getattr(batch, field_name), heads[kind])
        weights = dict(self.targets.spec.loss_weights)
        if loss_weights:
            weights.update(loss_weights)
        return multi_target(results, weights)

    def loss(self, batch, **kwargs):
        return self.forward(batch, **kwargs).loss


def build(config, seed=None):
    """Instantiate ``config``; parameters are a deterministic function of seed."""
    return ComposedModel(config, seed)


def replace_target(model, new_target, num_classes=None, seed=0, pooling=None):
    """Swap the target component, keeping every other parameter tensor.

    Non-target tensors are shared by identity with ``model``; the new heads
    are freshly initialised from ``seed``. ``pooling`` overrides the pooling
    strategy of the new model.
    """
    if isinstance(new_target, TargetSpec):
        kinds = list(new_target.kinds)
        weights = dict(new_target.loss_weights)
    else:
        kinds = [new_target] if isinstance(new_target, str) else list(new_target)
        weights = {}
    needs_pool = any(k in ("sp", "cls") for k in kinds)
    if needs_pool and model.streams:
        raise IncompatiblePooling("a dual-stream model has two pooled vectors; cls/sp need one")
    config = copy.deepcopy(model.config)
    config.target = kinds
    config.loss_weights = {k: weights.get(k, 1.0) for k in kinds}
    if num_classes is not None:
        config.hyper["num_classes"] = int(num_classes)
    if pooling is not None:
        config.pooling = pooling
    if needs_pool and config.pooling is None:
        config.pooling = "first"
    if config.pooling is not None and config.pooling not in POOLING_STRATEGIES:
        raise IncompatiblePooling(f"unknown pooling {config.pooling!r}")
    errors = [d for d in validate(config) if d.severity == "error"]
    if errors:
        raise ValidationFailed(errors)
    new = copy.copy(model)
    new.config = config
    new.pooling = config.pooling
    factory = ParamFactory(np.random.default_rng([seed, 7]))
    new.targets = new._build_targets(config, factory)
    kept = {name: p for name, p in model.params.items() if parse_param_name(name).component != "target"}
    new.params = {**kept, **factory.store}
    return new


def target_parameter_names(model):
    return [n for n in model.params if parse_param_name(n).component == "target"]


def is_pad(ids):
    return np.asarray(ids) == PAD_ID

