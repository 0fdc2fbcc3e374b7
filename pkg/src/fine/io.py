"""Self-describing binary container for checkpoints and learngenes.

Layout (all integers little-endian)::

    magic        4 bytes   b"FINE" (checkpoint) or b"LGNE" (learngene)
    version      u32
    header_len   u64
    header       header_len bytes of UTF-8 JSON
    payload      concatenated little-endian float64 tensor buffers
    crc32        u32 over the payload

The header's ``tensors`` list gives ``name, dtype, shape, offset, length`` for
each buffer, in payload order. Unknown header keys are ignored.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import factorized as fz
from .diffusion import EmaModel
from .dit import DiTConfig, build_model
from .errors import ConfigurationError, ContractError, CorruptionError, FormatError, VersionError

CHECKPOINT_MAGIC = b"FINE"
LEARNGENE_MAGIC = b"LGNE"
FORMAT_VERSION = 1
LEARNGENE_TENSORS = tuple(f"{p}_{k}" for k in fz.FAMILY_KINDS for p in ("U", "V"))
_PREFIX = struct.Struct("<4sIQ")
EMA_PREFIX = "ema/"


def atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_container(path, magic, meta, tensors):
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append(
            {"name": name, "dtype": "f64", "shape": list(np.shape(arr)), "offset": offset, "length": len(buf)}
        )
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode("utf-8")
    blob = (
        _PREFIX.pack(magic, FORMAT_VERSION, len(header))
        + header
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )
    atomic_write(path, blob)


@dataclass
class Container:
    magic: bytes
    version: int
    meta: dict
    index: list
    tensors: dict = field(default_factory=dict)


def read_container(path, expect=None):
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 4:
        raise FormatError(f"{path}: file too short to be a container")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic not in (CHECKPOINT_MAGIC, LEARNGENE_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r}")
    if expect is not None and magic != expect:
        raise FormatError(f"{path}: expected a {expect.decode()} file, found {magic.decode()}")
    if version > FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        index = header["tensors"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    payload = raw[start + hlen:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f"{path}: payload checksum mismatch")
    tensors = {}
    expected_offset = 0
    for entry in index:
        name, off, length = entry["name"], entry["offset"], entry["length"]
        shape = tuple(entry["shape"])
        if entry.get("dtype") != "f64":
            raise FormatError(f"{path}: tensor {name} has unsupported dtype {entry.get('dtype')}")
        if off != expected_offset or length != 8 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: tensor {name} has an inconsistent index entry")
        if off + length > len(payload):
            raise FormatError(f"{path}: tensor {name} runs past the payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=length // 8, offset=off).reshape(shape).astype(np.float64)
        expected_offset = off + length
    if expected_offset != len(payload):
        raise FormatError(f"{path}: payload has {len(payload) - expected_offset} unindexed bytes")
    return Container(magic, version, meta, index, tensors)


def save_learngene(path, lg):
    write_container(path, LEARNGENE_MAGIC, lg.meta(), lg.tensors())


def load_learngene(path):
    c = read_container(path, expect=LEARNGENE_MAGIC)
    missing = [n for n in LEARNGENE_TENSORS if n not in c.tensors]
    if missing:
        raise FormatError(f"{path}: learngene is missing tensor(s) {', '.join(missing)}")
    extra = sorted(set(c.tensors) - set(LEARNGENE_TENSORS))
    if extra:
        raise FormatError(f"{path}: learngene holds unexpected tensor(s) {', '.join(extra)}")
    m = c.meta
    try:
        lg = fz.Learngene(
            factors={k: (c.tensors[f"U_{k}"], c.tensors[f"V_{k}"]) for k in fz.FAMILY_KINDS},
            width=int(m["D"]),
            hidden=int(m["D_prime"]),
            rank=int(m["r"]),
            group_size=int(m["s"]),
            condensation_steps=int(m.get("condensation_steps", 0)),
            seed=int(m.get("seed", 0)),
            format_version=int(m.get("format_version", fz.LEARNGENE_FORMAT_VERSION)),
        )
    except KeyError as e:
        raise FormatError(f"{path}: learngene metadata lacks {e}") from None
    for k in fz.FAMILY_KINDS:
        m1, m2 = fz.family_shape(k, lg.width, lg.hidden)
        U, V = lg.factors[k]
        if U.shape != (m1, lg.rank) or V.shape != (m2, lg.rank):
            raise FormatError(f"{path}: factors for {k} have shapes {U.shape}, {V.shape}")
    return lg


@dataclass
class Checkpoint:
    model: object
    meta: dict
    ema: object = None


def save_checkpoint(path, model, *, step=0, seed=0, ema=None, extra=None):
    params = model.parameters()
    meta = {
        "config": model.config.to_dict(),
        "seed": seed,
        "step": step,
        "transferred": int(model.transferred),
        "frozen": sorted(n for n, p in params.items() if not p.requires_grad),
    }
    if model.fitted_at_init is not None:
        meta["fitted_at_init"] = int(model.fitted_at_init)
    if ema is not None:
        meta["ema_decay"] = ema.decay
    if extra:
        meta.update(extra)
    tensors = {n: p.data for n, p in params.items()}
    if ema is not None:
        tensors.update({EMA_PREFIX + n: s for n, s in ema.shadow.items()})
    write_container(path, CHECKPOINT_MAGIC, meta, tensors)


def load_checkpoint(path):
    c = read_container(path, expect=CHECKPOINT_MAGIC)
    try:
        cfg = DiTConfig.from_dict(c.meta["config"])
    except (KeyError, TypeError, ConfigurationError):
        raise FormatError(f"{path}: checkpoint header lacks a usable model config") from None
    weights = {n: a for n, a in c.tensors.items() if not n.startswith(EMA_PREFIX)}
    try:
        model = build_model(cfg, weights)
    except (ContractError, ConfigurationError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
    frozen = set(c.meta.get("frozen", ()))
    for n, p in model.parameters().items():
        p.requires_grad = n not in frozen
    model.transferred = int(c.meta.get("transferred", 0))
    if c.meta.get("fitted_at_init") is not None:
        model.fitted_at_init = int(c.meta["fitted_at_init"])
    ema = None
    shadow = {n[len(EMA_PREFIX):]: a for n, a in c.tensors.items() if n.startswith(EMA_PREFIX)}
    if shadow:
        ema = EmaModel.__new__(EmaModel)
        ema.decay = float(c.meta.get("ema_decay", 0.9999))
        ema.shadow = shadow
    return Checkpoint(model, c.meta, ema)
