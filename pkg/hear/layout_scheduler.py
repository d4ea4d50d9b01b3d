"""
Layout-aware batching.

Samples are grouped by layout signature so that every batch shares one
electrode configuration and therefore one tensor shape. Each epoch shuffles
within groups and interleaves the groups' batches at random. Batches can be
loaded ahead of consumption by a background thread, and a simulated set of
data-parallel workers checks that every worker sees the same layout at every
step.
"""
import contextlib
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset, Sampler

from .channel_dictionary import GlobalDictionary, LayoutMapping, layout_signature, map_layout
from .constants import (
    DEFAULT_AMPLITUDE_SCALE,
    DEFAULT_BATCH_SIZE,
    DEFAULT_HIGH_FREQ,
    DEFAULT_LOW_FREQ,
    DEFAULT_MAX_TIME_PATCHES,
    DEFAULT_PREFETCH_DEPTH,
    DEFAULT_SAMPLE_RATE,
    DEFAULT_WINDOW_LEN,
)
from .container import DatasetContainer, SubsetInfo, parse_sample_id, read_manifest, sample_id
from .exceptions import ConfigError, DesyncDetectedError, EmptyBatchError, LoadError, ManifestError
from .signal_pipeline import Recording, preprocess_recording, segment_patches

logger = logging.getLogger(__name__)

_SENTINEL = object()


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    signature: str
    subset_id: str
    offset: int


@dataclass
class DatasetIndex:
    """
    Samples grouped by layout signature.

    Attributes:
        samples: Every sample in manifest order
        groups: signature -> sample ids, keys in lexicographic order
        layouts: signature -> channel names shared by the group
    """
    samples: List[SampleRecord] = field(default_factory=list)
    groups: Dict[str, List[str]] = field(default_factory=dict)
    layouts: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self._positions = {record.sample_id: position for position, record in enumerate(self.samples)}

    def __len__(self) -> int:
        return len(self.samples)

    def position(self, sample_id_value: str) -> int:
        return self._positions[sample_id_value]

    def record(self, sample_id_value: str) -> SampleRecord:
        return self.samples[self._positions[sample_id_value]]

    def group_sizes(self) -> Dict[str, int]:
        return {signature: len(members) for signature, members in self.groups.items()}

    def subset(self, sample_ids: Iterable[str]) -> 'DatasetIndex':
        """Index restricted to ``sample_ids`` (e.g. one split)."""
        wanted = set(sample_ids)
        records = [record for record in self.samples if record.sample_id in wanted]
        return build_index(records, self.layouts)


@dataclass(frozen=True)
class Batch:
    signature: str
    sample_ids: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class BatchPlan:
    batches: Tuple[Batch, ...]
    seed: int
    batch_size: int

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)

    def signatures(self) -> List[str]:
        return [batch.signature for batch in self.batches]


def build_index(records: Sequence[SampleRecord], layouts: Dict[str, Tuple[str, ...]]) -> DatasetIndex:
    groups: Dict[str, List[str]] = {}
    for record in records:
        groups.setdefault(record.signature, []).append(record.sample_id)
    ordered = {signature: groups[signature] for signature in sorted(groups)}
    return DatasetIndex(
        samples=list(records),
        groups=ordered,
        layouts={signature: layouts[signature] for signature in ordered},
    )


def group_by_layout(
    manifest: Union[str, Path, Sequence[SubsetInfo]],
    dictionary: Optional[GlobalDictionary] = None,
) -> DatasetIndex:
    """
    Group every sample of a manifest by layout signature.

    Args:
        manifest: Container directory or already parsed manifest entries
        dictionary: When given, subsets are keyed by the signature of their
            kept canonical names, so raw labels that resolve to the same
            electrodes share a group

    Returns:
        DatasetIndex with groups in lexicographic signature order
    """
    subsets = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)

    records: List[SampleRecord] = []
    layouts: Dict[str, Tuple[str, ...]] = {}
    for info in subsets:
        if dictionary is not None:
            mapping = map_layout(dictionary, info.channel_names, info.subset_id)
            signature, names = layout_signature(mapping), mapping.kept_names
        else:
            signature, names = info.signature, info.channel_names
        if layouts.setdefault(signature, names) != names:
            raise ManifestError(f"signature {signature} is shared by different channel lists")
        records.extend(
            SampleRecord(sample_id(info.subset_id, offset), signature, info.subset_id, offset)
            for offset in range(info.num_samples)
        )

    index = build_index(records, layouts)
    logger.info(f"Indexed {len(index)} samples in {len(index.groups)} layout groups")
    return index


def make_epoch_schedule(index: DatasetIndex, batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0) -> BatchPlan:
    """
    Build one epoch of layout-homogeneous batches.

    Members of each group are shuffled and chunked (the last chunk may be
    short). The next batch slot is then drawn from the groups with
    probability proportional to their remaining batch count.

    Args:
        index: Grouped dataset
        batch_size: Maximum batch size
        seed: Epoch seed; equal seeds give equal plans

    Returns:
        BatchPlan covering every sample exactly once
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")

    rng = np.random.default_rng(seed)
    per_group: List[List[Batch]] = []
    for signature, members in index.groups.items():
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        per_group.append([
            Batch(signature, tuple(shuffled[start:start + batch_size]))
            for start in range(0, len(shuffled), batch_size)
        ])

    remaining = np.array([len(batches) for batches in per_group], dtype=np.int64)
    cursors = [0] * len(per_group)
    ordered: List[Batch] = []
    while remaining.sum() > 0:
        group = int(rng.choice(len(per_group), p=remaining / remaining.sum()))
        ordered.append(per_group[group][cursors[group]])
        cursors[group] += 1
        remaining[group] -= 1

    return BatchPlan(batches=tuple(ordered), seed=seed, batch_size=batch_size)


class LayoutBatchSampler(Sampler):
    """
    Batch sampler yielding index positions of layout-homogeneous batches.

    Usable as ``DataLoader(dataset, batch_sampler=...)``; call ``set_epoch``
    to reshuffle between epochs.
    """

    def __init__(self, index: DatasetIndex, batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        self.index = index
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def plan(self) -> BatchPlan:
        return make_epoch_schedule(self.index, self.batch_size, self.seed + self.epoch)

    def __iter__(self) -> Iterator[List[int]]:
        for batch in self.plan():
            yield [self.index.position(member) for member in batch.sample_ids]

    def __len__(self) -> int:
        return sum(-(-size // self.batch_size) for size in self.index.group_sizes().values())


@dataclass
class LoadedBatch:
    """Tensors of one layout-homogeneous batch."""
    signature: str
    sample_ids: Tuple[str, ...]
    patches: torch.Tensor
    coordinates: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.sample_ids)

    def slice(self, start: int, stop: int) -> 'LoadedBatch':
        labels = self.labels[start:stop] if self.labels is not None else None
        return LoadedBatch(self.signature, self.sample_ids[start:stop], self.patches[start:stop], self.coordinates, labels)


class SubsetDataset(Dataset):
    """
    Preprocessed patch tensors read from a container.

    Each item is mapped onto the dictionary, preprocessed and segmented into
    w-sample patches (at most ``max_time_patches`` per channel).
    """

    def __init__(
        self,
        container: DatasetContainer,
        dictionary: GlobalDictionary,
        index: Optional[DatasetIndex] = None,
        window_len: int = DEFAULT_WINDOW_LEN,
        max_time_patches: int = DEFAULT_MAX_TIME_PATCHES,
        target_rate: float = DEFAULT_SAMPLE_RATE,
        low_freq: float = DEFAULT_LOW_FREQ,
        high_freq: float = DEFAULT_HIGH_FREQ,
        scale: float = DEFAULT_AMPLITUDE_SCALE,
        cache: bool = True,
    ):
        self.container = container
        self.dictionary = dictionary
        self.index = index if index is not None else group_by_layout(container.subsets, dictionary)
        self.window_len = window_len
        self.max_time_patches = max_time_patches
        self.target_rate = target_rate
        self.low_freq = low_freq
        self.high_freq = high_freq
        self.scale = scale
        self._mappings: Dict[str, LayoutMapping] = {}
        self._cache: Optional[Dict[str, np.ndarray]] = {} if cache else None

    def __len__(self) -> int:
        return len(self.index)

    def mapping(self, subset_id: str) -> LayoutMapping:
        if subset_id not in self._mappings:
            info = self.container.subset(subset_id)
            self._mappings[subset_id] = map_layout(self.dictionary, info.channel_names, subset_id)
        return self._mappings[subset_id]

    def layout_for(self, signature: str) -> LayoutMapping:
        """Mapping of any subset in the group ``signature``."""
        first = self.index.groups[signature][0]
        return self.mapping(self.index.record(first).subset_id)

    def patches(self, sample_id_value: str) -> np.ndarray:
        """C x N_t x w float32 patches of one sample."""
        if self._cache is not None and sample_id_value in self._cache:
            return self._cache[sample_id_value]

        subset_id, offset = parse_sample_id(sample_id_value)
        info = self.container.subset(subset_id)
        mapping = self.mapping(subset_id)
        raw = Recording(self.container.read_sample(subset_id, offset), info.sample_rate)
        rec = preprocess_recording(
            raw.pick(mapping.kept_indices, mapping),
            self.target_rate,
            self.low_freq,
            self.high_freq,
            self.scale,
        )
        patches = segment_patches(rec, self.window_len).patches[:, :self.max_time_patches].astype(np.float32)
        if self._cache is not None:
            self._cache[sample_id_value] = patches
        return patches

    def label(self, sample_id_value: str) -> Optional[int]:
        subset_id, offset = parse_sample_id(sample_id_value)
        return self.container.label(subset_id, offset)

    def __getitem__(self, position: int) -> Dict[str, Any]:
        record = self.index.samples[position]
        return {
            'sample_id': record.sample_id,
            'signature': record.signature,
            'patches': torch.from_numpy(self.patches(record.sample_id)),
            'label': self.label(record.sample_id),
        }

    def load_batch(self, batch: Batch) -> LoadedBatch:
        """Stack one planned batch into tensors."""
        if not batch.sample_ids:
            raise EmptyBatchError(f"batch for layout {batch.signature} is empty")
        patches = np.stack([self.patches(member) for member in batch.sample_ids])
        labels = [self.label(member) for member in batch.sample_ids]
        coordinates = self.layout_for(batch.signature).coordinates
        return LoadedBatch(
            signature=batch.signature,
            sample_ids=batch.sample_ids,
            patches=torch.from_numpy(patches),
            coordinates=torch.from_numpy(coordinates.astype(np.float32)),
            labels=None if any(label is None for label in labels) else torch.tensor(labels, dtype=torch.long),
        )


class PrefetchPipeline:
    """
    Load planned batches ahead of consumption on a background thread.

    Batches come out in plan order. At most ``prefetch_depth`` loaded batches
    wait in the buffer. A loader failure is raised as LoadError at the
    position where that batch would have been delivered.
    """

    def __init__(
        self,
        batches: Sequence[Any],
        loader: Callable[[Any], Any],
        prefetch_depth: int = DEFAULT_PREFETCH_DEPTH,
    ):
        if prefetch_depth < 0:
            raise ConfigError(f"prefetch_depth must be >= 0, got {prefetch_depth}")
        self.batches = list(batches)
        self.loader = loader
        self.prefetch_depth = prefetch_depth
        self._queue: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    def _put(self, item: Any) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _producer(self) -> None:
        for position, batch in enumerate(self.batches):
            if self._stop.is_set():
                return
            try:
                item = (position, self.loader(batch), None)
            except Exception as e:
                self._put((position, None, e))
                return
            if not self._put(item):
                return
        self._put(_SENTINEL)

    def __iter__(self) -> Iterator[Any]:
        if self.prefetch_depth == 0:
            yield from self._synchronous()
            return

        self._queue = queue.Queue(maxsize=self.prefetch_depth)
        self._stop.clear()
        self._thread = threading.Thread(target=self._producer, name='hear-prefetch', daemon=True)
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is _SENTINEL:
                    return
                position, loaded, error = item
                if error is not None:
                    logger.error(f"Loading batch {position} failed: {error}")
                    raise LoadError(position, error) from error
                yield loaded
        finally:
            self.close()

    def _synchronous(self) -> Iterator[Any]:
        for position, batch in enumerate(self.batches):
            try:
                loaded = self.loader(batch)
            except Exception as e:
                logger.error(f"Loading batch {position} failed: {e}")
                raise LoadError(position, e) from e
            yield loaded

    def close(self) -> None:
        """Stop the producer and wait for it to exit."""
        self._stop.set()
        if self._thread is None:
            return
        while self._thread.is_alive():
            with contextlib.suppress(queue.Empty):
                self._queue.get(timeout=0.05)
        self._thread.join()
        self._thread = None


def run_prefetch_pipeline(
    plan: Union[BatchPlan, Sequence[Any]],
    loader: Callable[[Any], Any],
    consumer: Callable[[Any], Any],
    prefetch_depth: int = DEFAULT_PREFETCH_DEPTH,
) -> List[Any]:
    """
    Feed every planned batch through ``loader`` then ``consumer``.

    Returns:
        Consumer results in plan order
    """
    batches = plan.batches if isinstance(plan, BatchPlan) else plan
    return [consumer(loaded) for loaded in PrefetchPipeline(batches, loader, prefetch_depth)]


def shard_sizes(count: int, worker_count: int) -> List[int]:
    """Contiguous shard sizes; the remainder goes to the lowest ranks."""
    base, extra = divmod(count, worker_count)
    return [base + (1 if rank < extra else 0) for rank in range(worker_count)]


def split_shards(items: Sequence[Any], worker_count: int) -> List[Tuple[Any, ...]]:
    shards = []
    start = 0
    for size in shard_sizes(len(items), worker_count):
        shards.append(tuple(items[start:start + size]))
        start += size
    return shards


class WorkerSim:
    """
    Logical data-parallel workers sharing one sampler seed.

    Every worker derives its own plan from its seed; rank 0 acts as the
    broadcaster and ``sync_layout_index`` checks each worker against it.
    ``seed_overrides`` lets tests corrupt individual workers.
    """

    def __init__(
        self,
        index: DatasetIndex,
        worker_count: int,
        batch_size: int = DEFAULT_BATCH_SIZE,
        seed: int = 0,
        seed_overrides: Optional[Dict[int, int]] = None,
    ):
        if worker_count < 1:
            raise ConfigError(f"worker_count must be >= 1, got {worker_count}")
        self.index = index
        self.worker_count = worker_count
        self.batch_size = batch_size
        self.seed = seed
        overrides = seed_overrides or {}
        self.worker_seeds = [overrides.get(rank, seed) for rank in range(worker_count)]
        self.plans = [make_epoch_schedule(index, batch_size, worker_seed) for worker_seed in self.worker_seeds]
        self.cursors = [0] * worker_count

    @property
    def steps(self) -> int:
        return len(self.plans[0])

    def _batch(self, rank: int, step: int) -> Batch:
        if not 1 <= step <= self.steps:
            raise IndexError(f"step {step} outside 1..{self.steps}")
        return self.plans[rank].batches[step - 1]

    def sync_layout_index(self, step: int) -> str:
        """
        Broadcast rank 0's layout for global ``step`` (1-based) and verify every worker.

        Raises:
            DesyncDetectedError: A worker planned a different layout or sample set
        """
        reference = self._batch(0, step)
        for rank in range(1, self.worker_count):
            observed = self._batch(rank, step)
            if observed != reference:
                logger.error(f"Worker {rank} diverged from rank 0 at step {step}")
                raise DesyncDetectedError(step, rank, reference.signature, observed.signature)
        for rank in range(self.worker_count):
            self.cursors[rank] = step
        return reference.signature

    def shards(self, step: int) -> List[Tuple[str, ...]]:
        """Per-worker sample ids of global ``step``, disjoint and jointly covering the batch."""
        return split_shards(self._batch(0, step).sample_ids, self.worker_count)

    def layout_sequence(self, rank: int) -> List[str]:
        return self.plans[rank].signatures()
