"""
Binary checkpoint format.

Layout (all integers little-endian):

    b"SGAO" | uint32 version | uint64 metadata length | metadata JSON | tensor blobs

The metadata carries the configs, training position and a manifest of
(name, shape, offset, length) entries; offsets are relative to the start of
the blob section and every blob is a row-major little-endian float32 array.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .errors import (
    CheckpointManifestError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .generator import GeneratorParams
from .models import DescriptorConfig, GeneratorConfig, TrainConfig
from .tensor_ops import Tensor, get_dtype

logger = logging.getLogger(__name__)

MAGIC = b"SGAO"
FORMAT_VERSION = 1
STORED_DTYPE = np.dtype("<f4")
_HEADER = struct.Struct("<4sIQ")


def to_stored_precision(tensor: Tensor) -> Tensor:
    """`tensor` rounded to the precision a checkpoint keeps, in its own dtype."""
    tensor = np.asarray(tensor)
    return tensor.astype(STORED_DTYPE).astype(tensor.dtype)


class ManifestEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0)
    length: int = Field(..., ge=0)


class CheckpointMeta(BaseModel):
    generator_config: GeneratorConfig
    train_config: Optional[TrainConfig] = None
    descriptor_config: Optional[DescriptorConfig] = None
    epoch: int = 0
    seed: int = 0
    epoch_seeds: List[int] = []
    state: Dict[str, Any] = {}
    manifest: List[ManifestEntry] = []


@dataclass
class Checkpoint:
    """θ (and optionally φ), configs and training position.

    Tensor names are grouped by prefix: ``theta/`` generator, ``phi/`` descriptor,
    ``bank/`` latent bank, ``optim/`` optimizer moments.
    """

    generator_config: GeneratorConfig
    tensors: Dict[str, Tensor]
    train_config: Optional[TrainConfig] = None
    descriptor_config: Optional[DescriptorConfig] = None
    epoch: int = 0
    seed: int = 0
    epoch_seeds: List[int] = field(default_factory=list)
    state: Dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> Dict[str, Tensor]:
        head = prefix + "/"
        return {name: t for name, t in self.tensors.items() if name.startswith(head)}

    def generator_params(self) -> GeneratorParams:
        params = GeneratorParams.from_named(self.tensors)
        params.validate(self.generator_config)
        return params

    def descriptor_params(self):
        from .descriptor import DescriptorParams

        phi = self.group("phi")
        if not phi or self.descriptor_config is None:
            return None
        return DescriptorParams.from_named(phi, self.descriptor_config)

    @property
    def has_descriptor(self) -> bool:
        return bool(self.group("phi"))


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    blobs: List[bytes] = []
    manifest: List[ManifestEntry] = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=STORED_DTYPE)
        blob = arr.tobytes()
        entry = ManifestEntry(
            name=name, shape=list(arr.shape), offset=offset, length=len(blob)
        )
        manifest.append(entry)
        blobs.append(blob)
        offset += len(blob)

    meta = CheckpointMeta(
        generator_config=ckpt.generator_config,
        train_config=ckpt.train_config,
        descriptor_config=ckpt.descriptor_config,
        epoch=ckpt.epoch,
        seed=ckpt.seed,
        epoch_seeds=ckpt.epoch_seeds,
        state=ckpt.state,
        manifest=manifest,
    )
    meta_bytes = meta.model_dump_json().encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes))
    return header + meta_bytes + b"".join(blobs)


def _check_manifest(manifest: List[ManifestEntry]) -> None:
    seen = set()
    for entry in manifest:
        if entry.name in seen:
            raise CheckpointManifestError(
                f"duplicate tensor '{entry.name}' in manifest"
            )
        seen.add(entry.name)
        expected = STORED_DTYPE.itemsize * int(np.prod(entry.shape, dtype=np.int64))
        if entry.length != expected:
            raise CheckpointManifestError(
                f"tensor '{entry.name}' has length {entry.length}, "
                f"shape {entry.shape} needs {expected}"
            )
    ordered = sorted(manifest, key=lambda e: e.offset)
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.offset < prev.offset + prev.length:
            raise CheckpointManifestError(
                f"tensors '{prev.name}' and '{nxt.name}' overlap"
            )


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointMagicError(
            f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}"
        )
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError("checkpoint header is truncated")
    _, version, meta_len = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} "
            f"(this build reads {FORMAT_VERSION})"
        )
    meta_end = _HEADER.size + meta_len
    if len(data) < meta_end:
        raise CheckpointTruncatedError("metadata block is truncated")
    try:
        meta = CheckpointMeta.model_validate_json(data[_HEADER.size:meta_end])
    except ValidationError as e:
        raise CheckpointManifestError(f"invalid checkpoint metadata: {e}") from e

    _check_manifest(meta.manifest)
    blob = memoryview(data)[meta_end:]
    tensors: Dict[str, Tensor] = {}
    for entry in meta.manifest:
        if entry.offset + entry.length > len(blob):
            raise CheckpointTruncatedError(
                f"tensor '{entry.name}' is truncated "
                f"({len(blob) - entry.offset} of {entry.length} bytes present)",
                tensor=entry.name,
            )
        count = entry.length // STORED_DTYPE.itemsize
        arr = np.frombuffer(blob, dtype=STORED_DTYPE, count=count, offset=entry.offset)
        tensors[entry.name] = arr.reshape(entry.shape).astype(get_dtype())

    return Checkpoint(
        generator_config=meta.generator_config,
        tensors=tensors,
        train_config=meta.train_config,
        descriptor_config=meta.descriptor_config,
        epoch=meta.epoch,
        seed=meta.seed,
        epoch_seeds=list(meta.epoch_seeds),
        state=dict(meta.state),
    )


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_to_bytes(ckpt)
    path.write_bytes(data)
    logger.info(
        f"💾 Saved checkpoint to {path} "
        f"({len(ckpt.tensors)} tensors, epoch {ckpt.epoch})"
    )
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    ckpt = checkpoint_from_bytes(path.read_bytes())
    logger.debug(f"Loaded checkpoint {path} at epoch {ckpt.epoch}")
    return ckpt
