"""Model checkpoint format (QCK1).

Layout (integers little-endian):
  magic "QCK1" | u32 header length | header UTF-8 text | blob
Header lines, in order: version, config.* (sorted keys), one
``tensor=name|role|dims|offset`` line per named tensor in model order
(parameters first, then batch-norm running statistics with role "state"),
and crc32 of the blob last. The blob is float32 little-endian tensor data at
the stated offsets. Dynamic (predicted) kernels are never stored: they are
regenerated from the question on every forward pass.

Emission is canonical, so load-then-save reproduces a file byte for byte.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import fields

import numpy as np

from .model import ModelConfig, VQAModel

MAGIC = b"QCK1"
FORMAT_VERSION = 1

_TUPLE_STR_FIELDS = {"vocab_words", "answer_words"}
_TUPLE_INT_FIELDS = {"encoder_channels"}
_INT_FIELDS = {"image_size", "embed_dim", "gru_hidden", "channels", "groups",
               "dynamic_groups", "predictor_hidden", "modules"}
_STR_FIELDS = {"variant", "head", "fusion", "dtype"}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def encode_config(config: ModelConfig) -> list[str]:
    lines = []
    for f in sorted(fields(ModelConfig), key=lambda f: f.name):
        value = getattr(config, f.name)
        if f.name in _TUPLE_STR_FIELDS or f.name in _TUPLE_INT_FIELDS:
            value = ",".join(str(v) for v in value)
        lines.append(f"config.{f.name}={value}")
    return lines


def decode_config(pairs: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for key, raw in pairs.items():
        if key in _TUPLE_STR_FIELDS:
            kwargs[key] = tuple(raw.split(","))
        elif key in _TUPLE_INT_FIELDS:
            kwargs[key] = tuple(int(v) for v in raw.split(","))
        elif key in _INT_FIELDS:
            kwargs[key] = int(raw)
        elif key in _STR_FIELDS:
            kwargs[key] = raw
        else:
            raise CheckpointError(f"unknown config key {key!r}")
    return ModelConfig(**kwargs)


def _named_tensors(model: VQAModel) -> list[tuple[str, str, np.ndarray]]:
    out = [(name, p.role, p.node.value.array) for name, p in model.named_parameters()]
    out += [(name, "state", arr) for name, arr in model.named_state()]
    return out


def save_checkpoint(path, model: VQAModel) -> None:
    tensors = _named_tensors(model)
    blob_parts = []
    index_lines = []
    offset = 0
    for name, role, arr in tensors:
        raw = arr.astype("<f4").tobytes()
        dims = " ".join(str(d) for d in arr.shape)
        index_lines.append(f"tensor={name}|{role}|{dims}|{offset}")
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    header_lines = [f"version={FORMAT_VERSION}"]
    header_lines += encode_config(model.config)
    header_lines += index_lines
    header_lines.append(f"crc32={crc}")
    header = ("\n".join(header_lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


def load_checkpoint(path) -> VQAModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedError("file ends inside the header length field")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise TruncatedError("file ends inside the header")
    header = raw[8:8 + header_len].decode("utf-8")
    blob = raw[8 + header_len:]

    config_pairs: dict[str, str] = {}
    index: list[tuple[str, str, tuple[int, ...], int]] = []
    crc_stored = None
    version = None
    for line in header.splitlines():
        if not line:
            continue
        key, value = line.split("=", 1)
        if key == "version":
            version = int(value)
        elif key.startswith("config."):
            config_pairs[key[len("config."):]] = value
        elif key == "tensor":
            name, role, dims, offset = value.split("|")
            shape = tuple(int(d) for d in dims.split()) if dims else ()
            index.append((name, role, shape, int(offset)))
        elif key == "crc32":
            crc_stored = int(value)
        else:
            raise CheckpointError(f"unknown header line {key!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if crc_stored is None:
        raise CheckpointError("missing crc32 line")
    if zlib.crc32(blob) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"blob crc mismatch (stored {crc_stored})")

    config = decode_config(config_pairs)
    model = VQAModel(config, seed=0)
    params = dict(model.named_parameters())
    state = dict(model.named_state())
    expected = set(params) | set(state)
    seen = set()
    for name, role, shape, offset in index:
        if name in seen:
            raise CheckpointError(f"duplicate tensor {name!r}")
        seen.add(name)
        if name in params:
            target_shape = params[name].shape
        elif name in state:
            target_shape = state[name].shape
        else:
            raise CheckpointError(f"tensor {name!r} not part of this model")
        if shape != tuple(target_shape):
            raise CheckpointError(f"tensor {name!r} shape {shape} != model {target_shape}")
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob):
            raise TruncatedError(f"tensor {name!r} extends past end of blob")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").reshape(shape)
        if name in params:
            params[name].assign(arr.astype(config.np_dtype))
        else:
            state[name][...] = arr.astype(state[name].dtype)
    missing = expected - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:4]}...")
    return model
