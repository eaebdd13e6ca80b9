"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DSD1"  u32 version
    u32 vocab size, then per symbol: u32 length + UTF-8 bytes
    u64 config length + canonical JSON
    sections, each: 4-byte tag (b"MODL" backbone, b"PRMT" prompts), u32 tensor count,
        per tensor: u32 name length + UTF-8 name, u32 rank, u64 extents,
        u8 dtype tag (1 = float64), row-major payload
    b"END." then u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import data_synth
from ..diffusion import DSDModel, ModelConfig
from ..errors import ConfigError, FormatError, UsageError
from .report import canonical_json

MAGIC = b"DSD1"
VERSION = 1
DTYPE_F64 = 1
TAG_MODEL = b"MODL"
TAG_PROMPTS = b"PRMT"
TAG_END = b"END."
SECTIONS = (TAG_MODEL, TAG_PROMPTS)


def _pack_str(s: str, width: str = "<I") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


def _pack_tensors(tag: bytes, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [tag, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def encode(config: dict, sections: dict[bytes, dict[str, np.ndarray]], vocab=data_synth.VOCAB) -> bytes:
    body = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(vocab))]
    body.extend(_pack_str(v) for v in vocab)
    body.append(_pack_str(canonical_json(config), "<Q"))
    for tag in SECTIONS:
        if tag in sections:
            body.append(_pack_tensors(tag, sections[tag]))
    body.append(TAG_END)
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, width: str, what: str) -> str:
        at = self.pos
        (n,) = self.unpack(width, f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} at offset {at} is not valid UTF-8") from None


@dataclass
class Checkpoint:
    config: dict
    vocab: tuple[str, ...]
    sections: dict[bytes, dict[str, np.ndarray]] = field(default_factory=dict)

    def model(self) -> DSDModel:
        tensors = self.sections.get(TAG_MODEL, {})
        if not tensors:
            raise UsageError("checkpoint holds no model tensors; nothing to score with")
        if "model" not in self.config:
            raise ConfigError("checkpoint config lacks a model section")
        return DSDModel.from_parameters(ModelConfig.from_dict(self.config["model"]), tensors).freeze()

    def prompts(self):
        from ..adapt import PromptParams

        tensors = self.sections.get(TAG_PROMPTS, {})
        if not tensors:
            raise UsageError("checkpoint holds no prompt tensors")
        return PromptParams.from_parameters(tensors)


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    at = r.pos
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} at offset {at}")
    (n_vocab,) = r.unpack("<I", "vocabulary size")
    vocab = tuple(r.string("<I", "vocabulary symbol") for _ in range(n_vocab))
    at = r.pos
    cfg_text = r.string("<Q", "config")
    try:
        config = json.loads(cfg_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"config at offset {at} is not JSON: {exc}") from None
    sections: dict[bytes, dict[str, np.ndarray]] = {}
    while True:
        at = r.pos
        tag = r.take(4, "section tag")
        if tag == TAG_END:
            break
        if tag not in SECTIONS:
            raise FormatError(f"unknown section tag {tag!r} at offset {at}")
        if tag in sections:
            raise FormatError(f"duplicate section {tag!r} at offset {at}")
        (count,) = r.unpack("<I", "tensor count")
        tensors = {}
        for _ in range(count):
            name = r.string("<I", "tensor name")
            (rank,) = r.unpack("<I", f"rank of {name!r}")
            shape = r.unpack(f"<{rank}Q", f"extents of {name!r}")
            at = r.pos
            (dtype,) = r.unpack("<B", f"dtype of {name!r}")
            if dtype != DTYPE_F64:
                raise FormatError(f"unknown dtype tag {dtype} for {name!r} at offset {at}")
            n = int(np.prod(shape, dtype=np.uint64)) if rank else 1
            payload = r.take(8 * n, f"payload of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        sections[tag] = tensors
    at = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if zlib.crc32(buf[:at]) != crc:
        raise FormatError(f"checksum mismatch at offset {at}: file is corrupted")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    if vocab != tuple(data_synth.VOCAB):
        raise FormatError("checkpoint vocabulary differs from this build's vocabulary")
    return Checkpoint(config, vocab, sections)


def save_checkpoint(model: DSDModel | None, params, path, extra_config: dict | None = None) -> None:
    """Write the backbone, the prompts, or both to ``path``."""
    if model is None and params is None:
        raise UsageError("nothing to save")
    config = dict(extra_config or {})
    sections = {}
    if model is not None:
        config["model"] = model.config.to_dict()
        sections[TAG_MODEL] = {k: v.data for k, v in model.named_parameters().items()}
    if params is not None:
        sections[TAG_PROMPTS] = {k: v.data for k, v in params.named_parameters().items()}
    Path(path).write_bytes(encode(config, sections))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(buf)
