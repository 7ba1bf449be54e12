#!/usr/bin/env python3
"""
Binary checkpoint container for backbones and router stacks.

Layout (little-endian):
    8-byte magic "DRLLMCK1", u32 version,
    u32 L, u32 d, u32 heads, u32 ffn, u32 vocab,
    then blocks until end of file, each:
        u32 name length, name bytes (utf-8), u32 rank, u32 dims[rank],
        float32 data (row-major)

Counter backbones write heads = ffn = 0 and carry their structure in the
counter.* blocks. Router stacks append routing.* and router.{l}.{param}
blocks to the same file. Values are always stored as float32: a model
built in 64-bit mode is rounded on save and loads in the current default
dtype.
"""

import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from backbone import Backbone, CounterBackbone, CounterModelSpec, ROLE_CODES, TinyTransformer
from config import TransformerConfig
from errors import FormatError, InputError
from logger import get_logger
from routing import RouterStack

logger = get_logger(__name__)

MAGIC = b"DRLLMCK1"
VERSION = 1                             # bump on any layout change
HEADER = struct.Struct("<8sIIIIII")      # magic, version, L, d, heads, ffn, vocab
U32 = struct.Struct("<I")               # name length, rank and dims

_CODE_ROLES = {code: role for role, code in ROLE_CODES.items()}


def _header_fields(backbone: Backbone):
    if isinstance(backbone, TinyTransformer):
        return backbone.heads, backbone.ffn_dim
    return 0, 0


def _encode_block(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f4")
    parts = [U32.pack(len(raw_name)), raw_name, U32.pack(array.ndim)]
    parts.extend(U32.pack(dim) for dim in array.shape)
    parts.append(array.tobytes())
    return b"".join(parts)


def save_checkpoint(backbone: Backbone, path, stack: Optional[RouterStack] = None) -> Path:
    """
    Write a backbone (and optionally its router stack) to `path`.

    Returns:
        The written path
    """
    path = Path(path)
    heads, ffn = _header_fields(backbone)
    chunks = [HEADER.pack(MAGIC, VERSION, backbone.num_layers, backbone.hidden_dim,
                          heads, ffn, backbone.vocab_size)]
    for name, array in backbone.parameters().items():
        chunks.append(_encode_block(name, array))
    if stack is not None:
        for name, array in stack.to_arrays().items():
            chunks.append(_encode_block(name, array))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Checkpoint written: {path}")
    return path


def _take(buffer: bytes, offset: int, size: int, what: str) -> Tuple[bytes, int]:
    if offset + size > len(buffer):
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buffer[offset:offset + size], offset + size


def read_container(path) -> Tuple[Dict[str, int], Dict[str, np.ndarray]]:
    """
    Parse a checkpoint file into its header fields and named float32 blocks.

    Raises:
        InputError: the file does not exist
        FormatError: wrong magic or version, truncated or duplicated blocks
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    buffer = path.read_bytes()
    raw, offset = _take(buffer, 0, HEADER.size, "header")
    magic, version, layers, hidden, heads, ffn, vocab = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = {"num_layers": layers, "hidden_dim": hidden, "heads": heads, "ffn": ffn, "vocab": vocab}

    blocks = {}
    while offset < len(buffer):
        raw, offset = _take(buffer, offset, U32.size, "name length")
        (name_len,) = U32.unpack(raw)
        raw, offset = _take(buffer, offset, name_len, "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("block name is not utf-8") from None
        raw, offset = _take(buffer, offset, U32.size, f"rank of {name}")
        (rank,) = U32.unpack(raw)
        raw, offset = _take(buffer, offset, U32.size * rank, f"dims of {name}")
        shape = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(shape)) if rank else 1
        raw, offset = _take(buffer, offset, 4 * count, f"data of {name}")
        if name in blocks:
            raise FormatError(f"duplicate block {name}")
        blocks[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return header, blocks


def _counter_from_blocks(header, blocks) -> CounterBackbone:
    try:
        codes = blocks["counter.roles"].astype(int)
        modulus = int(blocks["counter.modulus"][0])
        distractors = blocks["counter.distractors"]
    except KeyError as exc:
        raise FormatError(f"counter checkpoint is missing block {exc}") from None
    try:
        roles = "".join(_CODE_ROLES[int(c)] for c in codes)
    except KeyError:
        raise FormatError(f"unknown role codes {codes.tolist()}") from None
    spec = CounterModelSpec(header["num_layers"], header["hidden_dim"], modulus, roles,
                            max_seq_len=distractors.shape[0])
    return CounterBackbone(spec, distractors=distractors)


def _transformer_from_blocks(header, blocks) -> TinyTransformer:
    if "embed.position" not in blocks:
        raise FormatError("transformer checkpoint is missing embed.position")
    config = TransformerConfig(
        num_layers=header["num_layers"], hidden_dim=header["hidden_dim"], heads=header["heads"],
        ffn_dim=header["ffn"], vocab_size=header["vocab"], max_seq_len=blocks["embed.position"].shape[0])
    model_blocks = {k: v for k, v in blocks.items() if not k.startswith(("router.", "routing."))}
    expected = set(TinyTransformer(config).parameters())
    if set(model_blocks) != expected:
        missing = sorted(expected - set(model_blocks))
        raise FormatError(f"transformer checkpoint blocks do not match the architecture (missing {missing[:3]})")
    return TinyTransformer(config, params=model_blocks)


def load_checkpoint(path) -> Backbone:
    """Rebuild the backbone stored in a checkpoint."""
    header, blocks = read_container(path)
    if header["heads"] == 0:
        return _counter_from_blocks(header, blocks)
    return _transformer_from_blocks(header, blocks)


def load_router_stack(path) -> Optional[RouterStack]:
    """Router stack stored alongside the backbone, or None when there is none."""
    _, blocks = read_container(path)
    router_blocks = {k: v for k, v in blocks.items() if k.startswith(("router.", "routing."))}
    if not router_blocks:
        return None
    stack = RouterStack.from_arrays(router_blocks)
    stack.set_trainable(False)
    return stack
