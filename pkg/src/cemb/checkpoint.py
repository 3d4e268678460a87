"""Versioned binary checkpoint files.

Layout (all integers little-endian u32, floats little-endian f64)::

    b"CEMB"  version
    vocab:   n_tokens, then per token: byte_len, utf-8 bytes   (reserved tokens included)
    config:  byte_len, utf-8 JSON {"encoder": ..., "train": ..., "step": ...}
    params:  n_params, then per param: name_len, utf-8 name, ndim, dims..., f64 data (C order)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import RESERVED, EncoderConfig, Vocab, embed_sentences
from .diffcore import Tensor
from .errors import DataError

MAGIC = b"CEMB"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    vocab: Vocab
    params: dict[str, np.ndarray]  # encoder params plus "head.*" classifier params
    train_config: dict = field(default_factory=dict)
    step: int = 0
    format_version: int = FORMAT_VERSION

    def tensors(self, prefix_filter=None) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.params.items()
                if prefix_filter is None or prefix_filter(k)}

    @property
    def encoder_tensors(self) -> dict[str, Tensor]:
        return self.tensors(lambda k: not k.startswith("head."))

    def embed(self, sentences) -> np.ndarray:
        return embed_sentences(list(sentences), self.vocab, self.encoder_tensors, self.encoder_config)

    def to_bytes(self) -> bytes:
        buf = bytearray(MAGIC)
        buf += struct.pack("<I", self.format_version)
        buf += struct.pack("<I", len(self.vocab.itos))
        for tok in self.vocab.itos:
            raw = tok.encode("utf-8")
            buf += struct.pack("<I", len(raw)) + raw
        meta = json.dumps({"encoder": self.encoder_config.to_dict(), "train": self.train_config,
                           "step": self.step}, sort_keys=True).encode("utf-8")
        buf += struct.pack("<I", len(meta)) + meta
        buf += struct.pack("<I", len(self.params))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            raw = name.encode("utf-8")
            buf += struct.pack("<I", len(raw)) + raw
            buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += arr.tobytes()
        return bytes(buf)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            return cls._parse(data)
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"corrupt checkpoint: {exc}") from exc

    @classmethod
    def _parse(cls, data: bytes) -> "Checkpoint":
        reader = _Reader(data)
        if reader.take(4) != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        version = reader.u32()
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format version {version}")
        itos = [reader.take(reader.u32()).decode("utf-8") for _ in range(reader.u32())]
        if tuple(itos[:3]) != RESERVED:
            raise DataError("checkpoint vocabulary lacks the reserved header")
        meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
        params = {}
        for _ in range(reader.u32()):
            name = reader.take(reader.u32()).decode("utf-8")
            ndim = reader.u32()
            shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if reader.pos != len(data):
            raise DataError("trailing bytes after checkpoint parameters")
        return cls(EncoderConfig(**meta["encoder"]), Vocab(itos[3:]), params,
                   meta.get("train", {}), meta.get("step", 0), version)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("truncated checkpoint file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]
