"""
Orchestration of the command-line workflows.

Each ``run_*`` function takes a RunConfig, wires the library modules
together and writes its artefacts under ``config.output_dir``.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .activation import export_channel_activation, render_topomap, write_history_csv, write_scores_csv
from .channel_dictionary import GlobalDictionary, load_dictionary
from .checkpoint import KIND_CLASSIFIER, KIND_PRETRAIN, load_encoder, load_state, save_model
from .config import RunConfig, write_config_file
from .container import DatasetContainer, SubsetInfo
from .evaluation import (
    FineTuner,
    MetricSummary,
    SplitSpec,
    evaluate_transfer,
    run_protocol,
    split_dataset,
    write_results,
)
from .exceptions import ConfigError, EmptyBatchError
from .layout_scheduler import Batch, SubsetDataset
from .model_core import HEARClassifier, count_parameters
from .pretraining import Pretrainer, PretrainingModel, StepResult
from .synthetic_data import DEFAULT_LAYOUTS, SynthSpec, generate

logger = logging.getLogger(__name__)

PRETRAIN_CHECKPOINT = 'pretrain.ckpt'
PRETRAIN_LOG = 'pretrain_log.txt'
RESULTS_FILE = 'results.txt'
TRANSFER_FILE = 'transfer.txt'


@dataclass
class PretrainRun:
    checkpoint_path: Path
    log_path: Path
    history: List[StepResult] = field(default_factory=list)


@dataclass
class FinetuneRun:
    checkpoint_path: Path
    metrics: Dict[str, float]


@dataclass
class TopomapRun:
    signature: str
    channel_names: List[str]
    scores: np.ndarray
    csv_path: Path
    svg_path: Path
    history_path: Optional[Path] = None


def output_path(config: RunConfig, name: str) -> Path:
    path = Path(config.output_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def run_dictionary(config: RunConfig) -> GlobalDictionary:
    return load_dictionary(config.dictionary_path)


def open_dataset(config: RunConfig, dictionary: Optional[GlobalDictionary] = None) -> SubsetDataset:
    """Container at ``config.data_dir`` with the configured preprocessing."""
    dictionary = dictionary or run_dictionary(config)
    return SubsetDataset(
        DatasetContainer(config.data_dir),
        dictionary,
        window_len=config.window_len,
        max_time_patches=config.max_time_patches,
        target_rate=config.sample_rate,
        low_freq=config.low_freq,
        high_freq=config.high_freq,
        scale=config.amplitude_scale,
    )


def classifier_factory(config: RunConfig) -> Callable[[int], HEARClassifier]:
    """
    Builds a fresh classifier per seed.

    With ``config.checkpoint`` set, the architecture and encoder weights come
    from that checkpoint; otherwise the encoder is randomly initialised.
    """
    pretrained = load_encoder(config.checkpoint) if config.checkpoint else None
    model_config = pretrained.config if pretrained is not None else config.model_config()

    def build(seed: int) -> HEARClassifier:
        torch.manual_seed(seed)
        model = HEARClassifier(model_config, config.classes, linear_probe=config.linear_probe)
        if pretrained is not None:
            load_state(model.encoder, pretrained.state_dict())
        return model

    return build


def finetune_options(config: RunConfig) -> Dict[str, object]:
    return dict(
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        prefetch_depth=config.prefetch_depth,
    )


def run_generate(config: RunConfig) -> List[SubsetInfo]:
    spec = SynthSpec(
        layouts=config.layout_list() or DEFAULT_LAYOUTS,
        samples_per_layout=config.samples_per_layout,
        classes=config.classes,
        sample_rate=config.sample_rate,
        duration=config.duration,
        noise_sigma=config.noise_sigma,
        seed=config.seed,
        pink_noise=config.pink_noise,
        window_len=config.window_len,
    )
    return generate(spec, run_dictionary(config), config.data_dir)


def run_pretraining(config: RunConfig) -> PretrainRun:
    """
    Pretrain for ``config.steps`` steps and store the final checkpoint.

    With zero steps the initial weights are written and the log stays empty.
    """
    torch.manual_seed(config.seed)
    model = PretrainingModel(config.model_config())
    logger.info(f"Pretraining model {config.variant} with {count_parameters(model)} parameters")
    log_path = output_path(config, PRETRAIN_LOG)
    log_path.write_text('', encoding='utf-8')

    history: List[StepResult] = []
    if config.steps > 0:
        dataset = open_dataset(config)
        trainer = Pretrainer(
            model,
            dataset,
            batch_size=config.batch_size,
            mask_ratio=config.mask_ratio,
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            prefetch_depth=config.prefetch_depth,
            worker_count=config.workers,
            seed=config.seed,
        )
        history = trainer.train(config.steps, log_path)

    checkpoint_path = save_model(output_path(config, PRETRAIN_CHECKPOINT), model, KIND_PRETRAIN)
    write_config_file(output_path(config, 'pretrain.cfg'), config)
    if history:
        logger.info(f"Pretraining finished: total loss {history[0].total:.4f} -> {history[-1].total:.4f}")
    return PretrainRun(checkpoint_path=checkpoint_path, log_path=log_path, history=history)


def run_finetune(config: RunConfig) -> FinetuneRun:
    """Fine-tune once with ``config.seed`` and store the selected classifier."""
    dataset = open_dataset(config)
    ids = [record.sample_id for record in dataset.index.samples]
    train_ids, val_ids, test_ids = split_dataset(ids, SplitSpec(seed=config.seed))

    tuner = FineTuner(classifier_factory(config)(config.seed), dataset, seed=config.seed, **finetune_options(config))
    tuner.fit(dataset.index.subset(train_ids), dataset.index.subset(val_ids))
    metrics = tuner.evaluate(dataset.index.subset(test_ids))

    path = save_model(
        output_path(config, f"finetune_seed{config.seed}.ckpt"), tuner.model, KIND_CLASSIFIER, config.classes
    )
    return FinetuneRun(checkpoint_path=path, metrics=metrics)


def run_evaluation(config: RunConfig) -> Dict[str, MetricSummary]:
    """Full seed protocol; writes the results table."""
    dataset = open_dataset(config)
    summaries = run_protocol(dataset, classifier_factory(config), config.seeds, **finetune_options(config))
    write_results(output_path(config, RESULTS_FILE), Path(config.data_dir).name, summaries)
    return summaries


def run_transfer(config: RunConfig) -> Dict[str, Dict[str, float]]:
    """Zero-shot layout transfer between the first two layout groups."""
    dataset = open_dataset(config)
    signatures = list(dataset.index.groups)
    if len(signatures) < 2:
        raise ConfigError("layout transfer needs at least two layout groups")
    first = dataset.index.subset(dataset.index.groups[signatures[0]])
    second = dataset.index.subset(dataset.index.groups[signatures[1]])
    results = evaluate_transfer(dataset, classifier_factory(config), first, second, config.seed,
                                **finetune_options(config))

    lines = ['# direction, metric, value']
    for direction, metrics in results.items():
        lines.extend(f"{direction}, {name}, {value:.6f}" for name, value in metrics.items())
    output_path(config, TRANSFER_FILE).write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return results


def run_topomap(config: RunConfig, signature: Optional[str] = None, with_history: bool = False) -> TopomapRun:
    """
    Export channel activation scores and a scalp map for one layout group.

    With ``with_history`` the classifier is fine-tuned and the scores are
    recorded after every epoch.
    """
    dataset = open_dataset(config)
    if not dataset.index.groups:
        raise EmptyBatchError(f"no samples in {config.data_dir}")
    signature = signature or next(iter(dataset.index.groups))
    if signature not in dataset.index.groups:
        raise ConfigError(f"unknown layout signature {signature}")

    members = dataset.index.groups[signature]
    loaded = dataset.load_batch(Batch(signature, tuple(members[:config.batch_size])))
    mapping = dataset.layout_for(signature)
    model = classifier_factory(config)(config.seed)

    history_path = None
    if with_history:
        rows: List[np.ndarray] = []

        def record(epoch: int, current: HEARClassifier) -> None:
            rows.append(export_channel_activation(current, loaded.patches, loaded.coordinates))

        group = dataset.index.subset(members)
        train_ids, val_ids, _ = split_dataset(members, SplitSpec(seed=config.seed))
        tuner = FineTuner(model, dataset, seed=config.seed, epoch_callback=record, **finetune_options(config))
        tuner.fit(group.subset(train_ids), group.subset(val_ids))
        history_path = write_history_csv(output_path(config, 'topomap_history.csv'), mapping.kept_names, rows)

    scores = export_channel_activation(model, loaded.patches, loaded.coordinates)
    csv_path = write_scores_csv(output_path(config, 'topomap.csv'), mapping.kept_names, scores)
    svg_path = render_topomap(
        output_path(config, 'topomap.svg'), mapping.kept_names, mapping.coordinates, scores, title=signature
    )
    return TopomapRun(signature, list(mapping.kept_names), scores, csv_path, svg_path, history_path)
