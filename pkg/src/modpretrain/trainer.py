"""Optimisation loop: Adam with decoupled weight decay, linear warmup/decay,
global-norm clipping and NDJSON metrics."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .composer import replace_target
from .errors import NonFiniteGradient, NonFiniteValue
from .nn import parse_param_name

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 100
    clip_norm: float = 1.0
    batch_size: int = 16
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")

    @classmethod
    def from_dict(cls, values):
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    per_task: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    checkpoint: str = None
    wall_clock: float = 0.0
    steps: int = 0
    eval_accuracy: float = None


def lr_at(step, cfg):
    """Linear warmup to ``cfg.lr`` at ``warmup_steps``, then linear decay
    reaching 0 at ``total_steps``."""
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr
    return cfg.lr * max(0.0, (cfg.total_steps - step) / span)


def decays(name):
    """Weight decay applies to weight matrices/tables, not biases or norms."""
    try:
        role = parse_param_name(name).role
    except ValueError:
        return True
    if role.endswith("bias") or role.endswith("_gain") or role == "log_temp":
        return False
    return True


class Adam:
    """Bias-corrected Adam; state (m, v, t) is exposed for checkpointing."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr, frozen=()):
        self.t += 1
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()
                 if n not in frozen}
        adam_step(self.params, grads, self, self.t, self.cfg, lr)


def adam_step(params, grads, state, t, cfg, lr=None):
    """One in-place update of ``params[name].data`` for every name in ``grads``.

    Parameter data is updated in place so tied tensors stay shared.
    """
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * p.data
        p.data -= lr * update


def global_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients(params, clip_norm):
    """Scale every gradient so the global norm is at most ``clip_norm``;
    returns the norm before clipping."""
    norm = global_norm(params)
    if not np.isfinite(norm):
        raise NonFiniteGradient("gradient norm is not finite")
    if clip_norm and norm > clip_norm:
        scale = clip_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def train_step(model, batch, optimizer, lr, cfg, frozen=(), loss_weights=None):
    model.zero_grad()
    out = model.forward(batch, loss_weights=loss_weights)
    loss = out.loss.item()
    if not np.isfinite(loss):
        raise NonFiniteValue(f"loss is {loss}")
    out.loss.backward()
    clip_gradients(model.params, cfg.clip_norm)
    optimizer.step(lr, frozen)
    return out


def pretrain(model, data_stream, cfg, optimizer=None, start_step=0, stop_at=None, metrics=None,
             frozen=(), on_step=None):
    """Run steps ``start_step + 1 .. min(stop_at, total_steps)``.

    ``data_stream(step)`` returns the batch for a step; dropout is reseeded
    from (seed, step) so a resumed run replays an uninterrupted one exactly.
    ``metrics`` is a writable text file receiving one JSON record per
    ``log_every`` steps.
    """
    optimizer = optimizer or Adam(model.params, cfg)
    report = TrainReport()
    model.train()
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    started = time.perf_counter()
    for step in range(start_step + 1, end + 1):
        lr = lr_at(step, cfg)
        model.reseed_dropout(cfg.seed, step)
        out = train_step(model, data_stream(step), optimizer, lr, cfg, frozen)
        loss = out.loss.item()
        per_task = {k: {"loss": v[0], "correct": v[1], "count": v[2]} for k, v in out.per_task.items()}
        report.losses.append(loss)
        report.per_task.append(per_task)
        report.lrs.append(lr)
        report.steps += 1
        if metrics is not None and step % cfg.log_every == 0:
            metrics.write(json.dumps({"step": step, "lr": lr, "loss": loss, "per_task": per_task}) + "\n")
            metrics.flush()
        log.debug("step %d lr %.3g loss %.5f", step, lr, loss)
        if on_step is not None:
            on_step(step, model, optimizer)
    report.wall_clock = time.perf_counter() - started
    return report, optimizer


def accuracy(model, batch, kind="cls"):
    """Argmax accuracy of the ``kind`` head over ``batch`` in eval mode."""
    from . import autograd as ag

    was_training = model.training
    model.eval()
    with ag.no_grad():
        logits = model.class_logits(batch, kind)
    if was_training:
        model.train()
    labels = batch.cls_labels if kind == "cls" else batch.sp_labels
    return float(np.mean(np.argmax(logits.data, axis=-1) == labels))


def finetune(model, new_target, data_stream, cfg, eval_batch=None, num_classes=None, freeze=False,
             metrics=None, head_seed=0):
    """Replace the target, train, and report held-out accuracy.

    ``freeze=True`` updates only the new head's parameters.
    """
    tuned = replace_target(model, new_target, num_classes=num_classes, seed=head_seed)
    frozen = ()
    if freeze:
        frozen = {n for n in tuned.params if parse_param_name(n).component != "target"}
    report, _ = pretrain(tuned, data_stream, cfg, metrics=metrics, frozen=frozen)
    if eval_batch is not None:
        report.eval_accuracy = accuracy(tuned, eval_batch)
    return tuned, report


def steps_to_accuracy(model, data_stream, cfg, eval_batch, target, eval_every=5):
    """Train until held-out accuracy reaches ``target``; returns the step
    count (``cfg.total_steps + 1`` if never reached)."""
    hit = {"step": None}

    def check(step, m, _opt):
        if hit["step"] is None and step % eval_every == 0 and accuracy(m, eval_batch) >= target:
            hit["step"] = step
            raise _Reached()

    try:
        pretrain(model, data_stream, cfg, on_step=check)
    except _Reached:
        pass
    return hit["step"] if hit["step"] is not None else cfg.total_steps + 1


class _Reached(Exception):
    pass
