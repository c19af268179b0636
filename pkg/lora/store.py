"""The LRCY container: adapters, heads and backbone weights on disk.

Layout (all integers little-endian):

    magic "LRCY" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
    | u32 tensor count | per tensor: u16 name length, name, u8 ndim, u32 dims...,
      u64 byte offset into payload, u64 element count
    | u64 payload length | payload (float32) | u32 CRC32 of payload
"""

import json
import logging
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import asdict
from typing import Dict, Optional, Tuple

import numpy as np

from lora.adapter import LoRAAdapter
from lora.head import ClassificationHead
from model.vit import ViTConfig, ViTModel
from tensor.tensor import Tensor
from utils.constants import ARTIFACT_MAGIC, ARTIFACT_VERSION
from utils.errors import (ArtifactError, BadMagicError, ChecksumError, TruncatedPayloadError,
                          VersionMismatchError)

logger = logging.getLogger(__name__)

_PAYLOAD_DTYPE = np.dtype("<f4")


def encode_container(metadata: Dict, arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = []
    directory = bytearray()
    offset = 0
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes()
        name_bytes = name.encode("utf-8")
        directory += struct.pack("<H", len(name_bytes)) + name_bytes
        directory += struct.pack("<B", array.ndim)
        directory += struct.pack(f"<{array.ndim}I", *array.shape)
        directory += struct.pack("<QQ", offset, array.size)
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    out = bytearray(ARTIFACT_MAGIC)
    out += struct.pack("<II", ARTIFACT_VERSION, len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(arrays)) + directory
    out += struct.pack("<Q", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise TruncatedPayloadError(f"artifact ends inside the {what}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(data: bytes) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    cur = _Cursor(data)
    if len(data) < len(ARTIFACT_MAGIC) or data[:len(ARTIFACT_MAGIC)] != ARTIFACT_MAGIC:
        raise BadMagicError("not an LRCY artifact")
    cur.pos = len(ARTIFACT_MAGIC)
    (version,) = cur.unpack("<I", "header")
    if version != ARTIFACT_VERSION:
        raise VersionMismatchError(f"artifact version {version}, this build reads {ARTIFACT_VERSION}")
    (meta_len,) = cur.unpack("<I", "header")
    try:
        metadata = json.loads(cur.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"metadata block is not valid JSON: {e}") from e

    (count,) = cur.unpack("<I", "directory")
    entries = []
    for _ in range(count):
        (name_len,) = cur.unpack("<H", "directory")
        name = cur.take(name_len, "directory").decode("utf-8")
        (ndim,) = cur.unpack("<B", "directory")
        shape = cur.unpack(f"<{ndim}I", "directory") if ndim else ()
        offset, elements = cur.unpack("<QQ", "directory")
        if int(np.prod(shape, dtype=np.int64)) != elements:
            raise ArtifactError(f"tensor {name}: shape {shape} does not hold {elements} elements")
        entries.append((name, tuple(shape), offset, elements))

    (payload_len,) = cur.unpack("<Q", "payload header")
    payload = cur.take(payload_len, "payload")
    (crc,) = cur.unpack("<I", "checksum trailer")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("payload checksum does not match the trailer")

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    end_of_previous = 0
    for name, shape, offset, elements in sorted(entries, key=lambda e: e[2]):
        nbytes = elements * _PAYLOAD_DTYPE.itemsize
        if offset < end_of_previous:
            raise ArtifactError(f"tensor {name} overlaps its predecessor in the payload")
        if offset + nbytes > payload_len:
            raise TruncatedPayloadError(f"tensor {name} runs past the end of the payload")
        end_of_previous = offset + nbytes
    for name, shape, offset, elements in entries:
        raw = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE, count=elements, offset=offset)
        arrays[name] = raw.astype(np.float32).reshape(shape)
    return metadata, arrays


def write_container(path: str, metadata: Dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    blob = encode_container(metadata, arrays)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".lrcy-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def read_container(path: str) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ArtifactError(f"cannot read artifact {path}: {e}") from e
    return decode_container(data)


def save_artifact(adapter: LoRAAdapter, head: Optional[ClassificationHead], path: str) -> None:
    """Store an adapter and (optionally) its head in one artifact."""
    arrays = adapter.state_dict()
    metadata = {"kind": "lora", "rank": adapter.rank, "adapter": adapter.metadata}
    if head is not None:
        arrays["head.weight"] = head.weight.data
        arrays["head.bias"] = head.bias.data
        metadata["labels"] = list(head.labels)
    write_container(path, metadata, arrays)
    logger.debug("Saved artifact %s (rank %d, %d tensors)", path, adapter.rank, len(arrays))


def load_artifact(path: str) -> Tuple[LoRAAdapter, Optional[ClassificationHead]]:
    metadata, arrays = read_container(path)
    if metadata.get("kind") != "lora":
        raise ArtifactError(f"{path} holds a {metadata.get('kind')!r} artifact, not a LoRA")
    adapter = LoRAAdapter.from_state_dict(arrays, metadata.get("adapter"))
    head = None
    if "head.weight" in arrays:
        if "head.bias" not in arrays:
            raise ArtifactError(f"{path}: head.bias missing")
        head = ClassificationHead(
            weight=Tensor(arrays["head.weight"], name="head.weight"),
            bias=Tensor(arrays["head.bias"], name="head.bias"),
            labels=list(metadata.get("labels", [])),
        )
    logger.debug("Loaded artifact %s (rank %d)", path, adapter.rank)
    return adapter, head


def save_model(model: ViTModel, path: str) -> None:
    metadata = {"kind": "backbone", "config": asdict(model.cfg), "seed": model.seed}
    write_container(path, metadata, OrderedDict(model.state_dict()))


def load_model(path: str) -> ViTModel:
    metadata, arrays = read_container(path)
    if metadata.get("kind") != "backbone":
        raise ArtifactError(f"{path} holds a {metadata.get('kind')!r} artifact, not a backbone")
    model = ViTModel(ViTConfig(**metadata["config"]), seed=metadata.get("seed", 0))
    model.load_state_dict(arrays)
    model.freeze()
    return model
