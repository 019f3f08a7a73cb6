"""Binary checkpoints and parameter remapping between configurations.

File layout (little-endian)::

    b"MPTC"  u16 version  32-byte config fingerprint  u32 entry count
    per entry (sorted by name):
        u16 name length, UTF-8 name, u8 rank, u32 extent * rank,
        f64 payload, u32 CRC32 of the entry bytes above
    u32 CRC32 of everything before it

Optimizer state travels in the same file as ``optim.m.<name>``,
``optim.v.<name>`` and the scalar ``optim.t``.
"""

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointIOError,
    ChecksumMismatch,
    DuplicateDestination,
    FingerprintMismatch,
    ShapeMismatch,
    UnmatchedRequired,
)

MAGIC = b"MPTC"
VERSION = 1
OPTIM_PREFIX = "optim."


@dataclass
class Checkpoint:
    fingerprint: bytes
    entries: dict
    version: int = VERSION

    def params(self):
        return {n: a for n, a in self.entries.items() if not n.startswith(OPTIM_PREFIX)}


# -- encoding ------------------------------------------------------------------------

def encode(ckpt):
    if len(ckpt.fingerprint) != 32:
        raise CheckpointError("fingerprint must be 32 bytes")
    out = bytearray(MAGIC + struct.pack("<H", ckpt.version) + ckpt.fingerprint
                    + struct.pack("<I", len(ckpt.entries)))
    for name in sorted(ckpt.entries):
        array = np.asarray(ckpt.entries[name], dtype="<f8")
        raw = name.encode("utf-8")
        entry = struct.pack("<H", len(raw)) + raw + struct.pack("<B", array.ndim)
        entry += struct.pack(f"<{array.ndim}I", *array.shape) + array.tobytes(order="C")
        out += entry + struct.pack("<I", zlib.crc32(entry))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode(blob):
    """Parse and verify a whole checkpoint; raises before returning anything.

    The structure is walked first so a short file reports truncation rather
    than a checksum failure.
    """
    if len(blob) < 4 + 2 + 32 + 4 + 4:
        raise CheckpointIOError("checkpoint file is truncated")
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fingerprint = bytes(blob[6:38])
    (count,) = struct.unpack_from("<I", blob, 38)
    pos = 42
    end = len(blob) - 4
    entries = {}
    try:
        for _ in range(count):
            start = pos
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 8 * size + 4 > end:
                raise CheckpointIOError(f"entry {name!r} runs past the end of the file")
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            (crc,) = struct.unpack_from("<I", blob, pos)
            if zlib.crc32(blob[start:pos]) != crc:
                raise ChecksumMismatch(f"checksum mismatch in entry {name!r}")
            pos += 4
            if name in entries:
                raise CheckpointError(f"duplicate entry {name!r}")
            entries[name] = data
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointIOError(f"malformed checkpoint: {exc}") from None
    if pos != end:
        raise CheckpointIOError("trailing bytes after the last entry")
    (stored,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(blob[:end]) != stored:
        raise ChecksumMismatch("whole-file checksum does not match")
    return Checkpoint(fingerprint, entries, version)


def write(path, ckpt):
    """Write via a temporary file in the same directory, then rename."""
    blob = encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write {path}: {exc}") from None


def read(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read {path}: {exc}") from None
    return decode(blob)


# -- models --------------------------------------------------------------------------

def to_checkpoint(model, optimizer=None):
    entries = {name: p.data for name, p in model.params.items()}
    if optimizer is not None:
        for name in model.params:
            entries[f"{OPTIM_PREFIX}m.{name}"] = optimizer.m[name]
            entries[f"{OPTIM_PREFIX}v.{name}"] = optimizer.v[name]
        entries[f"{OPTIM_PREFIX}t"] = np.asarray(float(optimizer.t))
    return Checkpoint(model.config.fingerprint(), entries)


def save(model, path, optimizer=None):
    ckpt = to_checkpoint(model, optimizer)
    write(path, ckpt)
    return ckpt


def load(path, model, optimizer=None, force=False):
    """Restore ``model`` (and optionally ``optimizer``) from ``path``.

    Everything is checked before the first tensor is written, so a failed
    load leaves the model untouched. ``force`` skips the fingerprint check
    but still requires matching names and shapes.
    """
    ckpt = read(path) if isinstance(path, (str, os.PathLike)) else path
    return restore(ckpt, model, optimizer, force)


def restore(ckpt, model, optimizer=None, force=False):
    params = ckpt.params()
    missing = sorted(set(model.params) - set(params))
    extra = sorted(set(params) - set(model.params))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name in sorted(model.params):
        if params[name].shape != model.params[name].shape:
            raise ShapeMismatch(f"{name}: checkpoint {params[name].shape} vs model {model.params[name].shape}")
    if not force and ckpt.fingerprint != model.config.fingerprint():
        raise FingerprintMismatch("checkpoint was written for a different configuration")
    if optimizer is not None:
        for name in model.params:
            for kind in ("m", "v"):
                key = f"{OPTIM_PREFIX}{kind}.{name}"
                if key not in ckpt.entries:
                    raise CheckpointError(f"checkpoint has no optimizer state {key!r}")
                if ckpt.entries[key].shape != model.params[name].shape:
                    raise ShapeMismatch(f"{key}: shape {ckpt.entries[key].shape}")
        if f"{OPTIM_PREFIX}t" not in ckpt.entries:
            raise CheckpointError("checkpoint has no optimizer step counter")
    for name, p in model.params.items():
        np.copyto(p.data, params[name])
    if optimizer is not None:
        for name in model.params:
            np.copyto(optimizer.m[name], ckpt.entries[f"{OPTIM_PREFIX}m.{name}"])
            np.copyto(optimizer.v[name], ckpt.entries[f"{OPTIM_PREFIX}v.{name}"])
        optimizer.t = int(ckpt.entries[f"{OPTIM_PREFIX}t"].item())
    return model


# -- remapping -------------------------------------------------------------------------

@dataclass
class RemapRule:
    """``add`` names a source table whose row ``add_row`` is added to every
    row of the mapped tensor, e.g. folding segment 0 into positions."""

    src: str
    dst: str
    transpose: bool = False
    add: str = None
    add_row: int = 0


@dataclass
class RemapPlan:
    """Ordered rules; the first rule whose ``src`` pattern matches a source
    name decides its destination. ``*`` in ``src`` matches one or more whole
    dot-separated segments and is substituted into ``dst``."""

    rules: list = field(default_factory=list)
    unmatched: str = "skip"

    def __post_init__(self):
        if self.unmatched not in ("skip", "error"):
            raise ValueError("unmatched policy must be 'skip' or 'error'")
        for r in self.rules:
            if r.src.count("*") > 1 or r.dst.count("*") > r.src.count("*"):
                raise ValueError(f"malformed rule {r.src!r} -> {r.dst!r}")

    @classmethod
    def identity(cls):
        return cls([RemapRule("*", "*")])

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict) or not isinstance(raw.get("rules", []), list):
            raise ValueError("remap plan must be an object with a 'rules' list")
        unknown = set(raw) - {"rules", "unmatched"}
        if unknown:
            raise ValueError(f"unknown remap plan keys {sorted(unknown)}")
        rules = []
        for r in raw.get("rules", []):
            if not isinstance(r, dict) or not isinstance(r.get("src"), str) or not isinstance(r.get("dst"), str):
                raise ValueError(f"malformed remap rule {r!r}")
            unknown = set(r) - {"src", "dst", "transpose", "add", "add_row"}
            if unknown:
                raise ValueError(f"unknown remap rule keys {sorted(unknown)}")
            add = r.get("add")
            if add is not None and (not isinstance(add, str) or "*" in add):
                raise ValueError(f"rule 'add' must be a literal tensor name, got {add!r}")
            rules.append(RemapRule(r["src"], r["dst"], bool(r.get("transpose", False)), add,
                                   int(r.get("add_row", 0))))
        return cls(rules, raw.get("unmatched", "skip"))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        rules = []
        for r in self.rules:
            rule = {"src": r.src, "dst": r.dst, "transpose": r.transpose}
            if r.add is not None:
                rule.update(add=r.add, add_row=r.add_row)
            rules.append(rule)
        return {"rules": rules, "unmatched": self.unmatched}

    def map_name(self, name):
        """(destination, rule) for ``name``, or (None, None)."""
        for rule in self.rules:
            captured = match_pattern(rule.src, name)
            if captured is not None:
                dst = rule.dst.replace("*", captured) if "*" in rule.dst else rule.dst
                return dst, rule
        return None, None


def match_pattern(pattern, name):
    """Return the text matched by ``*`` ("" when the pattern is literal), or None."""
    if "*" not in pattern:
        return "" if pattern == name else None
    head, tail = pattern.split("*")
    if not name.startswith(head) or not name.endswith(tail) or len(name) < len(head) + len(tail) + 1:
        return None
    captured = name[len(head):len(name) - len(tail)]
    # the wildcard spans whole segments only
    if (head and not head.endswith(".")) or (tail and not tail.startswith(".")):
        return None
    if captured.startswith(".") or captured.endswith(".") or ".." in captured:
        return None
    return captured


@dataclass
class TransferReport:
    transferred: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    initialized: list = field(default_factory=list)

    def counts(self):
        return {"transferred": len(self.transferred), "skipped": len(self.skipped),
                "initialized": len(self.initialized)}

    def to_dict(self):
        return {**self.counts(), "transferred_names": self.transferred, "skipped_names": self.skipped,
                "initialized_names": self.initialized}


def remap(src, plan, dst_model):
    """Map ``src``'s parameters onto ``dst_model``'s parameter table.

    Returns (checkpoint for ``dst_model``, report). Destination tensors not
    written by any rule keep ``dst_model``'s fresh initialisation.
    """
    src_params = src.params() if isinstance(src, Checkpoint) else dict(src)
    assigned = {}
    report = TransferReport()
    for name in sorted(src_params):
        dst, rule = plan.map_name(name)
        if dst is None or dst not in dst_model.params:
            if plan.unmatched == "error":
                why = "no rule matches" if dst is None else f"destination {dst!r} does not exist"
                raise UnmatchedRequired(f"{name}: {why}")
            report.skipped.append(name)
            continue
        if dst in assigned:
            raise DuplicateDestination(f"{dst!r} receives both {assigned[dst][0]!r} and {name!r}")
        value = src_params[name].T if rule.transpose else src_params[name]
        if rule.add is not None:
            extra = src_params.get(rule.add)
            if extra is None or extra.ndim != 2 or not 0 <= rule.add_row < extra.shape[0]:
                raise CheckpointError(f"{name}: cannot add row {rule.add_row} of {rule.add!r}")
            if value.shape[-1:] != extra.shape[1:]:
                raise ShapeMismatch(f"{name}: added row {extra.shape[1:]} vs {value.shape}")
            value = value + extra[rule.add_row]
        if value.shape != dst_model.params[dst].shape:
            raise ShapeMismatch(f"{name} -> {dst}: {value.shape} vs {dst_model.params[dst].shape}")
        assigned[dst] = (name, value)
        report.transferred.append(dst)
    entries = {}
    for name, p in dst_model.params.items():
        if name in assigned:
            entries[name] = np.array(assigned[name][1], dtype=np.float64)
        else:
            entries[name] = p.data.copy()
            report.initialized.append(name)
    report.transferred.sort()
    return Checkpoint(dst_model.config.fingerprint(), entries), report
