"""
Fine-tuning and evaluation protocol.

Datasets are split 3:1:1 with a seeded shuffle, the classifier is fine-tuned
with the checkpoint of best validation balanced accuracy kept, and test
metrics are reported as mean and sample standard deviation over seeds.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .constants import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_PREFETCH_DEPTH,
    DEFAULT_SEEDS,
    DEFAULT_WEIGHT_DECAY,
    SPLIT_RATIOS,
)
from .exceptions import ConfigError, EmptyMatrixError, TooFewSamplesError
from .layout_scheduler import DatasetIndex, LayoutBatchSampler, LoadedBatch, PrefetchPipeline
from .model_core import HEARClassifier, finetune_forward

logger = logging.getLogger(__name__)

METRIC_NAMES = ('balanced_accuracy', 'weighted_f1', 'macro_f1')


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[int, int, int] = SPLIT_RATIOS
    seed: int = 0


@dataclass(frozen=True)
class ConfusionMatrix:
    """L x L counts, rows are true classes and columns predictions."""
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_balanced_accuracy: float


@dataclass
class MetricSummary:
    mean: float
    std: float
    values: List[float] = field(default_factory=list)


def split_dataset(sample_ids: Sequence[str], spec: SplitSpec = SplitSpec()) -> Tuple[List[str], List[str], List[str]]:
    """
    Seeded shuffle then contiguous train/val/test split.

    Sizes are floor(3n/5), floor(n/5) and the remainder for the default ratios.

    Raises:
        TooFewSamplesError: Fewer than 5 samples
    """
    n = len(sample_ids)
    if n < 5:
        raise TooFewSamplesError(f"need at least 5 samples to split, got {n}")
    total = sum(spec.ratios)
    n_train = spec.ratios[0] * n // total
    n_val = spec.ratios[1] * n // total

    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [sample_ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> ConfusionMatrix:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return ConfusionMatrix(counts)


def _counts(cm: Union[ConfusionMatrix, np.ndarray, Sequence[Sequence[int]]]) -> np.ndarray:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise EmptyMatrixError(f"confusion matrix must be square, got shape {counts.shape}")
    if counts.sum() <= 0:
        raise EmptyMatrixError("confusion matrix has no samples")
    return counts.astype(np.float64)


def _per_class(counts: np.ndarray):
    true_positive = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    recall = np.divide(true_positive, support, out=np.zeros_like(true_positive), where=support > 0)
    precision = np.divide(true_positive, predicted, out=np.zeros_like(true_positive), where=predicted > 0)
    denominator = precision + recall
    f1 = np.divide(2 * precision * recall, denominator, out=np.zeros_like(true_positive), where=denominator > 0)
    return support, recall, f1


def balanced_accuracy(cm) -> float:
    """Mean recall over classes with non-zero support."""
    support, recall, _ = _per_class(_counts(cm))
    return float(recall[support > 0].mean())


def macro_f1(cm) -> float:
    support, _, f1 = _per_class(_counts(cm))
    return float(f1[support > 0].mean())


def weighted_f1(cm) -> float:
    support, _, f1 = _per_class(_counts(cm))
    return float((support * f1).sum() / support.sum())


def compute_metrics(cm) -> Dict[str, float]:
    return {
        'balanced_accuracy': balanced_accuracy(cm),
        'weighted_f1': weighted_f1(cm),
        'macro_f1': macro_f1(cm),
    }


def summarize(values: Sequence[float]) -> MetricSummary:
    """Mean and sample (n - 1) standard deviation."""
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if len(array) > 1 else 0.0
    return MetricSummary(mean=float(array.mean()), std=std, values=[float(v) for v in array])


class FineTuner:
    """
    Supervised training of a HEARClassifier.

    After every epoch the validation balanced accuracy is computed; the
    weights of the best epoch are restored when training ends.
    """

    def __init__(
        self,
        model: HEARClassifier,
        dataset,
        epochs: int = 10,
        batch_size: int = DEFAULT_BATCH_SIZE,
        learning_rate: float = DEFAULT_LEARNING_RATE,
        weight_decay: float = DEFAULT_WEIGHT_DECAY,
        prefetch_depth: int = DEFAULT_PREFETCH_DEPTH,
        seed: int = 0,
        epoch_callback: Optional[Callable[[int, HEARClassifier], None]] = None,
    ):
        self.model = model
        self.dataset = dataset
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.prefetch_depth = prefetch_depth
        self.seed = seed
        self.epoch_callback = epoch_callback
        self.history: List[EpochRecord] = []
        self.best_score = -math.inf

    def _batches(self, index: DatasetIndex, seed: int):
        plan = LayoutBatchSampler(index, self.batch_size, seed).plan()
        return PrefetchPipeline(plan.batches, self.dataset.load_batch, self.prefetch_depth)

    def _tensors(self, loaded: LoadedBatch):
        if loaded.labels is None:
            raise ConfigError(f"batch of layout {loaded.signature} has no labels")
        dtype = next(self.model.parameters()).dtype
        return loaded.patches.to(dtype), loaded.coordinates.to(dtype), loaded.labels

    def fit(self, train_index: DatasetIndex, val_index: Optional[DatasetIndex] = None) -> List[EpochRecord]:
        """
        Train for the configured number of epochs.

        Args:
            train_index: Training samples
            val_index: Validation samples; when empty the last epoch is kept

        Returns:
            Per-epoch training loss and validation score
        """
        trainable = [p for p in self.model.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(trainable, lr=self.learning_rate, weight_decay=self.weight_decay)
        steps_per_epoch = max(1, len(LayoutBatchSampler(train_index, self.batch_size, self.seed)))
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=self.epochs * steps_per_epoch)
        best_state = None
        has_val = val_index is not None and len(val_index) > 0

        for epoch in range(1, self.epochs + 1):
            self.model.train()
            losses = []
            for loaded in self._batches(train_index, self.seed * 1_000_003 + epoch):
                patches, coordinates, labels = self._tensors(loaded)
                optimizer.zero_grad(set_to_none=True)
                loss = F.cross_entropy(finetune_forward(self.model, patches, coordinates), labels)
                loss.backward()
                optimizer.step()
                scheduler.step()
                losses.append(loss.item())

            score = -math.inf
            if has_val:
                score = balanced_accuracy(self.confusion(val_index))
            record = EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0, score)
            self.history.append(record)
            logger.info(
                f"Epoch {epoch}/{self.epochs}: train loss {record.train_loss:.4f}, val balanced accuracy {score:.4f}"
            )

            if has_val and score > self.best_score:
                self.best_score = score
                best_state = copy.deepcopy(self.model.state_dict())
            if self.epoch_callback is not None:
                self.epoch_callback(epoch, self.model)

        if best_state is not None:
            self.model.load_state_dict(best_state)
        return self.history

    def predict(self, index: DatasetIndex) -> Tuple[List[int], List[int]]:
        """True and predicted labels over every sample of ``index``."""
        self.model.eval()
        y_true: List[int] = []
        y_pred: List[int] = []
        with torch.no_grad():
            for loaded in self._batches(index, self.seed):
                patches, coordinates, labels = self._tensors(loaded)
                logits = finetune_forward(self.model, patches, coordinates)
                y_true.extend(int(v) for v in labels)
                y_pred.extend(int(v) for v in logits.argmax(dim=-1))
        return y_true, y_pred

    def confusion(self, index: DatasetIndex) -> ConfusionMatrix:
        y_true, y_pred = self.predict(index)
        return confusion_matrix(y_true, y_pred, self.model.num_classes)

    def evaluate(self, index: DatasetIndex) -> Dict[str, float]:
        return compute_metrics(self.confusion(index))


def run_protocol(
    dataset,
    model_factory: Callable[[int], HEARClassifier],
    seeds: Sequence[int] = DEFAULT_SEEDS,
    index: Optional[DatasetIndex] = None,
    **finetune_options,
) -> Dict[str, MetricSummary]:
    """
    Split, fine-tune and test once per seed.

    Args:
        dataset: SubsetDataset with labels
        model_factory: Builds a fresh classifier for a seed
        seeds: Protocol seeds
        index: Samples to use; defaults to the whole dataset
        **finetune_options: Passed to FineTuner

    Returns:
        Metric name -> mean, sample std and per-seed values
    """
    index = index if index is not None else dataset.index
    ids = [record.sample_id for record in index.samples]
    per_metric: Dict[str, List[float]] = {name: [] for name in METRIC_NAMES}

    for seed in seeds:
        torch.manual_seed(seed)
        train_ids, val_ids, test_ids = split_dataset(ids, SplitSpec(seed=seed))
        tuner = FineTuner(model_factory(seed), dataset, seed=seed, **finetune_options)
        tuner.fit(index.subset(train_ids), index.subset(val_ids))
        metrics = tuner.evaluate(index.subset(test_ids))
        logger.info(f"Seed {seed}: " + ', '.join(f"{name}={value:.4f}" for name, value in metrics.items()))
        for name in METRIC_NAMES:
            per_metric[name].append(metrics[name])

    return {name: summarize(values) for name, values in per_metric.items()}


def evaluate_transfer(
    dataset,
    model_factory: Callable[[int], HEARClassifier],
    first: DatasetIndex,
    second: DatasetIndex,
    seed: int = 0,
    **finetune_options,
) -> Dict[str, Dict[str, float]]:
    """
    Fine-tune on one layout group and test on the other, in both directions.

    Returns:
        ``"first->second"`` and ``"second->first"`` metric dictionaries
    """
    results = {}
    for name, source, target in (('first->second', first, second), ('second->first', second, first)):
        torch.manual_seed(seed)
        ids = [record.sample_id for record in source.samples]
        train_ids, val_ids, _ = split_dataset(ids, SplitSpec(seed=seed))
        tuner = FineTuner(model_factory(seed), dataset, seed=seed, **finetune_options)
        tuner.fit(source.subset(train_ids), source.subset(val_ids))
        results[name] = tuner.evaluate(target)
        logger.info(f"Transfer {name}: balanced accuracy {results[name]['balanced_accuracy']:.4f}")
    return results


def write_results(path: Union[str, Path], dataset_name: str, summaries: Dict[str, MetricSummary]) -> Path:
    """Write the results table, one line per metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ['# dataset, metric, mean, std, seed_values']
    for metric, summary in summaries.items():
        values = ';'.join(f"{value:.6f}" for value in summary.values)
        lines.append(f"{dataset_name}, {metric}, {summary.mean:.6f}, {summary.std:.6f}, {values}")
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


def read_results(path: Union[str, Path]) -> Dict[str, Dict[str, MetricSummary]]:
    table: Dict[str, Dict[str, MetricSummary]] = {}
    with Path(path).open(encoding='utf-8') as handle:
        for raw in handle:
            text = raw.strip()
            if not text or text.startswith('#'):
                continue
            dataset_name, metric, mean, std, values = [part.strip() for part in text.split(',')]
            seed_values = [float(v) for v in values.split(';') if v]
            table.setdefault(dataset_name, {})[metric] = MetricSummary(float(mean), float(std), seed_values)
    return table
