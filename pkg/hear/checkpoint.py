"""
Binary checkpoint files.

Layout (little-endian): magic ``HEAR``, uint16 version, uint32 length + UTF-8
JSON header (ModelConfig fields, ``kind``, ``num_classes``), uint32 tensor
count, then per tensor: uint16 name length, name, uint8 rank, uint32 dims and
float32 data.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Union

import numpy as np
import torch
import torch.nn as nn

from .exceptions import CheckpointError
from .model_core import HEARModel, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b'HEAR'
VERSION = 1
ENCODER_PREFIX = 'encoder.'

KIND_ENCODER = 'encoder'
KIND_PRETRAIN = 'pretrain'
KIND_CLASSIFIER = 'classifier'
KINDS = (KIND_ENCODER, KIND_PRETRAIN, KIND_CLASSIFIER)


@dataclass
class Checkpoint:
    config: ModelConfig
    kind: str
    num_classes: int = 0
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def encoder_state(self) -> Dict[str, torch.Tensor]:
        """Encoder parameters regardless of which model wrote the file."""
        if self.kind == KIND_ENCODER:
            return dict(self.tensors)
        return {
            name[len(ENCODER_PREFIX):]: tensor
            for name, tensor in self.tensors.items()
            if name.startswith(ENCODER_PREFIX)
        }


def _read_exact(handle: BinaryIO, size: int) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint: wanted {size} bytes, got {len(data)}")
    return data


def _unpack(handle: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(handle, struct.calcsize(fmt)))


def write_checkpoint(
    path: Union[str, Path],
    config: ModelConfig,
    state: Mapping[str, torch.Tensor],
    kind: str = KIND_ENCODER,
    num_classes: int = 0,
) -> Path:
    """
    Serialize a state dict with its architecture header.

    Args:
        path: Destination file; parent directories are created
        config: Architecture of the model that produced ``state``
        state: Named tensors, stored as float32
        kind: One of ``encoder``, ``pretrain``, ``classifier``
        num_classes: Head width for classifier checkpoints

    Returns:
        The written path
    """
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header = dict(config.to_dict(), kind=kind, num_classes=num_classes)
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')

    with path.open('wb') as handle:
        handle.write(MAGIC)
        handle.write(struct.pack('<HI', VERSION, len(header_bytes)))
        handle.write(header_bytes)
        handle.write(struct.pack('<I', len(state)))
        for name, tensor in state.items():
            name_bytes = name.encode('utf-8')
            array = tensor.detach().cpu().to(torch.float32).numpy()
            handle.write(struct.pack('<H', len(name_bytes)))
            handle.write(name_bytes)
            handle.write(struct.pack('<B', array.ndim))
            handle.write(struct.pack(f'<{array.ndim}I', *array.shape))
            handle.write(array.astype('<f4').tobytes(order='C'))

    logger.info(f"Wrote {kind} checkpoint with {len(state)} tensors to {path}")
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Parse a checkpoint file.

    Raises:
        CheckpointError: Bad magic, unsupported version, truncation or a bad header
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")

    with path.open('rb') as handle:
        if _read_exact(handle, 4) != MAGIC:
            raise CheckpointError(f"{path} is not a HEAR checkpoint")
        version, header_len = _unpack(handle, '<HI')
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(_read_exact(handle, header_len).decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}")

        kind = header.pop('kind', KIND_ENCODER)
        num_classes = int(header.pop('num_classes', 0))
        config = ModelConfig.from_dict(header)

        (count,) = _unpack(handle, '<I')
        tensors: Dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = _unpack(handle, '<H')
            name = _read_exact(handle, name_len).decode('utf-8')
            (rank,) = _unpack(handle, '<B')
            shape = _unpack(handle, f'<{rank}I') if rank else ()
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(handle, 4 * size), dtype='<f4').reshape(shape)
            tensors[name] = torch.from_numpy(data.astype(np.float32))

    logger.debug(f"Read {kind} checkpoint {path} ({len(tensors)} tensors)")
    return Checkpoint(config=config, kind=kind, num_classes=num_classes, tensors=tensors)


def save_model(path: Union[str, Path], model: nn.Module, kind: str, num_classes: int = 0) -> Path:
    """Write any HEAR module that carries a ``config`` attribute."""
    return write_checkpoint(path, model.config, model.state_dict(), kind=kind, num_classes=num_classes)


def load_state(model: nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """Copy tensors into ``model`` in place, keeping its dtype and device."""
    current = model.state_dict()
    missing = sorted(set(current) - set(tensors))
    unexpected = sorted(set(tensors) - set(current))
    if missing or unexpected:
        raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    with torch.no_grad():
        for name, target in current.items():
            source = tensors[name]
            if tuple(source.shape) != tuple(target.shape):
                raise CheckpointError(f"{name}: shape {tuple(source.shape)} != {tuple(target.shape)}")
            target.copy_(source.to(dtype=target.dtype, device=target.device))


def load_encoder(path: Union[str, Path]) -> HEARModel:
    """Rebuild a bare encoder from an encoder, pretraining or classifier checkpoint."""
    checkpoint = read_checkpoint(path)
    model = HEARModel(checkpoint.config)
    load_state(model, checkpoint.encoder_state())
    return model
