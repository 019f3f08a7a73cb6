"""``modpretrain`` command line.

Exit codes: 0 success; 1 configuration, validation, conversion or
missing-decoder errors; 2 parse errors, bad usage, unreadable inputs;
3 data errors; 4 numeric divergence.

Logging verbosity comes from ``MODPRETRAIN_LOG`` (error, info, debug).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt_mod
from .composer import build, load_config, validate
from .data import (
    Vocab,
    audio_vocab,
    dataset_from_manifest,
    make_loader,
    synth_audio,
    synth_vision,
    toy_corpus,
    toy_dataset,
    tokenize,
    write_array,
    pad_rows,
)
from .decoder import greedy_generate
from .errors import (
    CheckpointError,
    CheckpointIOError,
    ConfigError,
    DataError,
    DuplicateDestination,
    ModPretrainError,
    NoDecoder,
    NonFiniteValue,
    ParseError,
    UnmatchedRequired,
)
from .batch import Batch
from .trainer import Adam, TrainConfig, finetune, pretrain

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("modpretrain")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    elif text:
        print(text)


def vocab_path(ckpt_path):
    return f"{ckpt_path}.vocab.json"


def read_config(path):
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def checked_model(path, seed=None):
    config = read_config(path)
    errors = [d for d in validate(config) if d.severity == "error"]
    if errors:
        for d in errors:
            print(f"error {d.rule}: {d.message}", file=sys.stderr)
        raise ConfigError("configuration has validation errors")
    return build(config, seed)


def load_train_config(path, seed=None, overrides=None):
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read train config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno) from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if seed is not None:
        values["seed"] = seed
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from None


def dataset_for(args, config, split="train"):
    if args.data in (None, "toy"):
        return toy_dataset(config, seed=args.seed or 0)
    from .data import load_manifest
    return dataset_from_manifest(load_manifest(args.data), config, split)


# -- subcommands -----------------------------------------------------------------------

def cmd_validate(args):
    config = read_config(args.config)
    diagnostics = validate(config)
    for d in diagnostics:
        keys = ", ".join(d.keys)
        print(f"{d.severity} {d.rule}: {d.message} [{keys}]", file=sys.stderr)
    errors = [d for d in diagnostics if d.severity == "error"]
    emit(args, {"ok": not errors, "diagnostics": [d.to_dict() for d in diagnostics],
                "defaults_filled": config.defaults_filled},
         "ok" if not errors else None)
    return EXIT_CONFIG if errors else EXIT_OK


def cmd_inspect(args):
    if bool(args.ckpt) == bool(args.config):
        raise UsageError("inspect needs exactly one of --ckpt or --config")
    if args.config:
        model = checked_model(args.config)
        table = [(n, list(p.shape), int(p.size)) for n, p in sorted(model.params.items())]
    else:
        ck = ckpt_mod.read(args.ckpt)
        table = [(n, list(a.shape), int(a.size)) for n, a in sorted(ck.params().items())]
    total = sum(row[2] for row in table)
    lines = [f"{n:<48} {str(tuple(s)):<16} {c}" for n, s, c in table]
    lines.append(f"total parameters: {total} in {len(table)} tensors")
    emit(args, {"total": total, "tensors": len(table),
                "params": [{"name": n, "shape": s, "count": c} for n, s, c in table]}, "\n".join(lines))
    return EXIT_OK


def cmd_pretrain(args):
    model = checked_model(args.config, args.seed)
    cfg = load_train_config(args.train_config, args.seed, {"total_steps": args.steps})
    dataset = dataset_for(args, model.config)
    stream = dataset.stream(model.config, cfg.batch_size, cfg.seed)
    optimizer = Adam(model.params, cfg)
    start = 0
    if args.resume:
        ckpt_mod.load(args.resume, model, optimizer)
        start = optimizer.t
    loader = make_loader(stream, args.loaders, cfg.seed)
    mode = "a" if args.resume else "w"
    metrics = open(args.metrics, mode, encoding="utf-8") if args.metrics else None
    try:
        report, optimizer = pretrain(model, loader, cfg, optimizer=optimizer, start_step=start,
                                     stop_at=args.stop_at, metrics=metrics)
    finally:
        if metrics:
            metrics.close()
        if hasattr(loader, "close"):
            loader.close()
    ckpt_mod.save(model, args.out, optimizer)
    if dataset.vocab is not None:
        dataset.vocab.save(vocab_path(args.out))
    final = report.losses[-1] if report.losses else None
    emit(args, {"steps": report.steps, "last_step": optimizer.t, "final_loss": final, "checkpoint": args.out},
         f"trained steps {start + 1}..{optimizer.t}; final loss {final}; checkpoint {args.out}")
    return EXIT_OK


def cmd_finetune(args):
    model = checked_model(args.config, args.seed)
    if args.ckpt:
        ckpt_mod.load(args.ckpt, model, force=args.force)
    cfg = load_train_config(args.train_config, args.seed, {"total_steps": args.steps})
    target = [t.strip() for t in args.target.split(",")]
    from .composer import replace_target
    probe = replace_target(model, target, num_classes=args.num_classes)
    dataset = dataset_for(args, probe.config)
    stream = dataset.stream(probe.config, cfg.batch_size, cfg.seed)
    eval_batch = stream.full() if "cls" in target else None
    metrics = open(args.metrics, "w", encoding="utf-8") if args.metrics else None
    try:
        tuned, report = finetune(model, target, stream, cfg, eval_batch=eval_batch,
                                 num_classes=args.num_classes, freeze=args.freeze, metrics=metrics)
    finally:
        if metrics:
            metrics.close()
    if args.out:
        ckpt_mod.save(tuned, args.out)
    emit(args, {"steps": report.steps, "final_loss": report.losses[-1], "eval_accuracy": report.eval_accuracy},
         f"fine-tuned {report.steps} steps; final loss {report.losses[-1]:.4f}; accuracy {report.eval_accuracy}")
    return EXIT_OK


def cmd_generate(args):
    model = checked_model(args.config)
    if model.decoder is None:
        raise NoDecoder("configuration has no decoder")
    ckpt_mod.load(args.ckpt, model)
    vpath = vocab_path(args.ckpt)
    vocab = Vocab.load(vpath) if os.path.exists(vpath) else None
    try:
        with open(args.input, encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh if line.strip()]
    except OSError as exc:
        raise UsageError(f"cannot read input {args.input}: {exc}") from None
    model.eval()
    outputs = []
    if lines:
        if vocab is None:
            raise DataError(f"no vocabulary sidecar {vpath}")
        from .batch import CLS_ID, SEP_ID
        ids = pad_rows([[CLS_ID] + vocab.encode(tokenize(line)) + [SEP_ID] for line in lines])
        batch = Batch(token_ids=ids, pad_mask=(ids != 0).astype(np.float64))
        decoded = greedy_generate(model, batch, args.max_len)
        outputs = [" ".join(vocab.decode(row)) for row in decoded]
    emit(args, {"outputs": outputs}, "\n".join(outputs) if outputs else None)
    return EXIT_OK


def cmd_convert(args):
    src = ckpt_mod.read(args.src_ckpt)
    try:
        plan = ckpt_mod.RemapPlan.load(args.plan)
    except OSError as exc:
        raise UsageError(f"cannot read plan {args.plan}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    except ValueError as exc:
        raise ConfigError(f"remap plan: {exc}") from None
    dst_model = checked_model(args.dst_config, args.seed)
    out, report = ckpt_mod.remap(src, plan, dst_model)
    ckpt_mod.write(args.out, out)
    counts = report.counts()
    total = len(dst_model.params)
    text = "\n".join([f"transferred  {counts['transferred']}",
                      f"skipped      {counts['skipped']}",
                      f"initialized  {counts['initialized']}",
                      f"destination  {total} tensors ({100.0 * counts['transferred'] / total:.1f}% transferred)"])
    emit(args, report.to_dict(), text)
    return EXIT_OK


def cmd_synth_data(args):
    os.makedirs(args.out, exist_ok=True)
    out = args.out
    if args.kind == "corpus":
        with open(os.path.join(out, "train.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(toy_corpus()) + "\n")
        manifest = {"format": "corpus", "train": "train.txt", "valid": "train.txt"}
    elif args.kind == "vision":
        manifest = {"format": "vision"}
        for i, split in enumerate(("train", "valid")):
            images, labels = synth_vision(args.n, args.classes, args.image_size, args.image_size,
                                          seed=(args.seed or 0) * 2 + i)
            write_array(os.path.join(out, f"{split}.bin"), images)
            write_array(os.path.join(out, f"{split}_labels.bin"), labels)
            manifest[split] = f"{split}.bin"
            manifest[f"{split}_labels"] = f"{split}_labels.bin"
    else:
        manifest = {"format": "audio"}
        vocab = audio_vocab()
        for i, split in enumerate(("train", "valid")):
            utts = synth_audio(args.n, vocab, seed=(args.seed or 0) * 2 + i)
            frames = np.zeros((len(utts), max(len(u[0]) for u in utts), utts[0][0].shape[1]))
            for j, (f, _) in enumerate(utts):
                frames[j, :len(f)] = f
            write_array(os.path.join(out, f"{split}.bin"), frames)
            write_array(os.path.join(out, f"{split}_lengths.bin"), np.asarray([len(u[0]) for u in utts]))
            write_array(os.path.join(out, f"{split}_targets.bin"), pad_rows([u[1] for u in utts]))
            manifest.update({split: f"{split}.bin", f"{split}_lengths": f"{split}_lengths.bin",
                             f"{split}_targets": f"{split}_targets.bin"})
    path = os.path.join(out, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    emit(args, {"manifest": path, **manifest}, f"wrote {path}")
    return EXIT_OK


# -- wiring ------------------------------------------------------------------------------

def build_parser():
    parser = Parser(prog="modpretrain", description="Compose, train and convert modular pre-training models.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
        p.set_defaults(func=func)
        return p

    p = add("validate", cmd_validate, "check a model configuration")
    p.add_argument("--config", required=True)

    p = add("inspect", cmd_inspect, "list parameter names, shapes and counts")
    p.add_argument("--config")
    p.add_argument("--ckpt")

    p = add("pretrain", cmd_pretrain, "pre-train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default="toy", help="dataset manifest, or 'toy' for built-in synthetic data")
    p.add_argument("--train-config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--resume")
    p.add_argument("--stop-at", type=int, help="stop after this step (schedule still spans total_steps)")
    p.add_argument("--loaders", type=int, default=1)

    p = add("finetune", cmd_finetune, "replace the target and fine-tune")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--force", action="store_true", help="load a checkpoint from a different config by name/shape")
    p.add_argument("--target", default="cls")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--data", default="toy")
    p.add_argument("--train-config")
    p.add_argument("--steps", type=int)
    p.add_argument("--freeze", action="store_true")
    p.add_argument("--metrics")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = add("generate", cmd_generate, "greedy decoding with a decoder model")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--max-len", type=int, default=32)

    p = add("convert", cmd_convert, "remap a checkpoint onto another configuration")
    p.add_argument("--src-ckpt", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--dst-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("synth-data", cmd_synth_data, "write a synthetic dataset and manifest")
    p.add_argument("--kind", choices=("corpus", "vision", "audio"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int)
    return parser


def setup_logging():
    level = os.environ.get("MODPRETRAIN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DuplicateDestination, UnmatchedRequired, NoDecoder, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteValue as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ModPretrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
