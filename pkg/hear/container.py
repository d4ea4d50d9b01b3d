"""
On-disk dataset container.

A container is a directory holding a text ``manifest`` (one line per subset)
and one binary ``<subset_id>.hsub`` file per subset, optionally accompanied by
a ``<subset_id>.labels`` sidecar with one integer label per sample.
"""
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .channel_dictionary import signature_for_names
from .exceptions import ContainerFormatError, ManifestError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest'
SUBSET_SUFFIX = '.hsub'
LABELS_SUFFIX = '.labels'
SUBSET_MAGIC = b'HSUB'
SUBSET_VERSION = 1
CHANNEL_SEPARATOR = ';'


@dataclass(frozen=True)
class SubsetInfo:
    """One manifest line."""
    subset_id: str
    signature: str
    channel_names: Tuple[str, ...]
    sample_rate: float
    num_samples: int

    def manifest_line(self) -> str:
        channels = CHANNEL_SEPARATOR.join(self.channel_names)
        return f"{self.subset_id}, {self.signature}, {channels}, {self.sample_rate:g}, {self.num_samples}"


@dataclass(frozen=True)
class SubsetHeader:
    channel_names: Tuple[str, ...]
    sample_rate: float
    channels: int
    samples_per_channel: int
    payload_offset: int
    sample_count: int

    @property
    def sample_bytes(self) -> int:
        return 4 * self.channels * self.samples_per_channel


def parse_manifest_line(text: str, line_no: int) -> SubsetInfo:
    parts = [part.strip() for part in text.split(',')]
    if len(parts) != 5:
        raise ManifestError(f"manifest line {line_no}: expected 5 fields, got {len(parts)}")

    subset_id, signature, channels, rate, count = parts
    if not subset_id:
        raise ManifestError(f"manifest line {line_no}: empty subset id")
    names = tuple(name.strip() for name in channels.split(CHANNEL_SEPARATOR) if name.strip())
    if not names:
        raise ManifestError(f"manifest line {line_no}: subset {subset_id!r} declares no channels")
    if signature_for_names(names) != signature:
        raise ManifestError(f"manifest line {line_no}: signature {signature} does not match the channel list")

    try:
        sample_rate = float(rate)
        num_samples = int(count)
    except ValueError:
        raise ManifestError(f"manifest line {line_no}: bad sample rate or sample count")
    if not math.isfinite(sample_rate) or sample_rate <= 0 or num_samples < 0:
        raise ManifestError(f"manifest line {line_no}: sample rate must be positive and count non-negative")

    return SubsetInfo(subset_id, signature, names, sample_rate, num_samples)


def read_manifest(root: Union[str, Path]) -> List[SubsetInfo]:
    """
    Parse ``<root>/manifest``.

    Raises:
        ManifestError: Missing file, malformed line, signature mismatch or duplicate subset id
    """
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"no manifest in {root}")

    subsets: List[SubsetInfo] = []
    seen = set()
    with path.open(encoding='utf-8') as handle:
        for line_no, raw in enumerate(handle, start=1):
            text = raw.strip()
            if not text or text.startswith('#'):
                continue
            info = parse_manifest_line(text, line_no)
            if info.subset_id in seen:
                raise ManifestError(f"manifest line {line_no}: duplicate subset id {info.subset_id!r}")
            seen.add(info.subset_id)
            subsets.append(info)
    return subsets


def write_manifest(root: Union[str, Path], subsets: Sequence[SubsetInfo]) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [info.manifest_line() for info in subsets]
    path.write_text(''.join(f"{line}\n" for line in lines), encoding='utf-8')
    return path


def subset_path(root: Union[str, Path], subset_id: str) -> Path:
    return Path(root) / f"{subset_id}{SUBSET_SUFFIX}"


def write_subset(
    root: Union[str, Path],
    subset_id: str,
    samples: np.ndarray,
    channel_names: Sequence[str],
    sample_rate: float,
    labels: Optional[Sequence[int]] = None,
) -> SubsetInfo:
    """
    Write one subset file (and its label sidecar when labels are given).

    Args:
        root: Container directory
        subset_id: File stem and manifest id
        samples: S x C x T array, stored as little-endian float32
        channel_names: C channel labels
        sample_rate: Sampling rate in Hz
        labels: Optional per-sample integer labels

    Returns:
        SubsetInfo for the manifest
    """
    samples = np.asarray(samples)
    if samples.ndim != 3 or samples.shape[1] != len(channel_names):
        raise ContainerFormatError(f"samples must be S x {len(channel_names)} x T, got {samples.shape}")
    if labels is not None and len(labels) != samples.shape[0]:
        raise ContainerFormatError(f"{len(labels)} labels for {samples.shape[0]} samples")

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    count, channels, length = samples.shape

    with subset_path(root, subset_id).open('wb') as handle:
        handle.write(SUBSET_MAGIC)
        handle.write(struct.pack('<HIId', SUBSET_VERSION, channels, length, float(sample_rate)))
        for name in channel_names:
            encoded = name.encode('utf-8')
            handle.write(struct.pack('<H', len(encoded)))
            handle.write(encoded)
        handle.write(np.ascontiguousarray(samples, dtype='<f4').tobytes(order='C'))

    if labels is not None:
        labels_path = root / f"{subset_id}{LABELS_SUFFIX}"
        labels_path.write_text(''.join(f"{int(label)}\n" for label in labels), encoding='utf-8')

    names = tuple(channel_names)
    return SubsetInfo(subset_id, signature_for_names(names), names, float(sample_rate), count)


def read_subset_header(path: Union[str, Path]) -> SubsetHeader:
    path = Path(path)
    if not path.exists():
        raise ContainerFormatError(f"subset file {path} is missing")

    size = path.stat().st_size
    with path.open('rb') as handle:
        if handle.read(4) != SUBSET_MAGIC:
            raise ContainerFormatError(f"{path} is not a subset file")
        fixed = handle.read(struct.calcsize('<HIId'))
        if len(fixed) != struct.calcsize('<HIId'):
            raise ContainerFormatError(f"{path}: truncated header")
        version, channels, length, sample_rate = struct.unpack('<HIId', fixed)
        if version != SUBSET_VERSION:
            raise ContainerFormatError(f"{path}: unsupported version {version}")
        names = []
        for _ in range(channels):
            raw_len = handle.read(2)
            if len(raw_len) != 2:
                raise ContainerFormatError(f"{path}: truncated channel block")
            (name_len,) = struct.unpack('<H', raw_len)
            names.append(handle.read(name_len).decode('utf-8'))
        offset = handle.tell()

    payload = size - offset
    sample_bytes = 4 * channels * length
    if sample_bytes == 0 or payload % sample_bytes != 0:
        raise ContainerFormatError(f"{path}: payload of {payload} bytes is not a whole number of samples")

    return SubsetHeader(
        channel_names=tuple(names),
        sample_rate=sample_rate,
        channels=channels,
        samples_per_channel=length,
        payload_offset=offset,
        sample_count=payload // sample_bytes,
    )


def read_labels(root: Union[str, Path], subset_id: str) -> Optional[np.ndarray]:
    path = Path(root) / f"{subset_id}{LABELS_SUFFIX}"
    if not path.exists():
        return None
    with path.open(encoding='utf-8') as handle:
        values = [int(line) for line in handle if line.strip()]
    return np.asarray(values, dtype=np.int64)


class DatasetContainer:
    """
    Read access to a container directory.

    Subset headers and labels are read once; samples are read on demand and
    returned as C x T float64 arrays.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.subsets: List[SubsetInfo] = read_manifest(self.root)
        self._by_id: Dict[str, SubsetInfo] = {info.subset_id: info for info in self.subsets}
        self._headers: Dict[str, SubsetHeader] = {}
        self._labels: Dict[str, Optional[np.ndarray]] = {}

        for info in self.subsets:
            header = read_subset_header(subset_path(self.root, info.subset_id))
            if header.channel_names != info.channel_names:
                raise ManifestError(f"subset {info.subset_id!r}: channel block differs from the manifest")
            if header.sample_count != info.num_samples:
                raise ManifestError(
                    f"subset {info.subset_id!r}: manifest lists {info.num_samples} samples, file holds {header.sample_count}"
                )
            self._headers[info.subset_id] = header
            self._labels[info.subset_id] = read_labels(self.root, info.subset_id)

        logger.info(f"Opened container {self.root} with {len(self.subsets)} subsets")

    def subset(self, subset_id: str) -> SubsetInfo:
        try:
            return self._by_id[subset_id]
        except KeyError:
            raise ManifestError(f"unknown subset {subset_id!r}")

    def header(self, subset_id: str) -> SubsetHeader:
        self.subset(subset_id)
        return self._headers[subset_id]

    def read_sample(self, subset_id: str, offset: int) -> np.ndarray:
        header = self.header(subset_id)
        if not 0 <= offset < header.sample_count:
            raise ContainerFormatError(f"subset {subset_id!r} has no sample {offset}")
        with subset_path(self.root, subset_id).open('rb') as handle:
            handle.seek(header.payload_offset + offset * header.sample_bytes)
            data = np.frombuffer(handle.read(header.sample_bytes), dtype='<f4')
        return data.reshape(header.channels, header.samples_per_channel).astype(np.float64)

    def label(self, subset_id: str, offset: int) -> Optional[int]:
        labels = self._labels.get(subset_id)
        if labels is None:
            return None
        return int(labels[offset])

    @property
    def has_labels(self) -> bool:
        return bool(self.subsets) and all(self._labels.get(info.subset_id) is not None for info in self.subsets)


def sample_id(subset_id: str, offset: int) -> str:
    return f"{subset_id}:{offset}"


def parse_sample_id(value: str) -> Tuple[str, int]:
    subset_id, _, offset = value.rpartition(':')
    if not subset_id:
        raise ManifestError(f"malformed sample id {value!r}")
    return subset_id, int(offset)
