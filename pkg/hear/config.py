"""
Run-level configuration.

A RunConfig is read from a flat ``key = value`` file (``#`` starts a comment)
and then overridden by command-line flags. Directory defaults come from the
Django settings.
"""
import logging
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from django.conf import settings

from .constants import (
    DEFAULT_AMPLITUDE_SCALE,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CODEBOOK_SIZE,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_HIGH_FREQ,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOW_FREQ,
    DEFAULT_MASK_RATIO,
    DEFAULT_MAX_TIME_PATCHES,
    DEFAULT_PREFETCH_DEPTH,
    DEFAULT_SAMPLE_RATE,
    DEFAULT_SEEDS,
    DEFAULT_WEIGHT_DECAY,
    DEFAULT_WINDOW_LEN,
    VARIANT_PRESETS,
)
from .exceptions import ConfigError
from .model_core import ModelConfig

logger = logging.getLogger(__name__)

_TRUE = {'true', '1', 'yes', 'on'}
_FALSE = {'false', '0', 'no', 'off'}


def _option(default=MISSING, help: str = '', default_factory=MISSING):
    if default_factory is not MISSING:
        return field(default_factory=default_factory, metadata={'help': help})
    return field(default=default, metadata={'help': help})


@dataclass(frozen=True)
class RunConfig:
    # Paths
    data_dir: str = _option(default_factory=lambda: str(settings.HEAR_DATA_DIR), help="dataset container directory")
    output_dir: str = _option(default_factory=lambda: str(settings.HEAR_OUTPUT_DIR), help="checkpoints, logs and results")
    dictionary_path: str = _option(
        default_factory=lambda: str(settings.HEAR_DICTIONARY_PATH), help="global electrode dictionary file"
    )
    checkpoint: str = _option('', help="checkpoint to start from or evaluate")

    # Model
    variant: str = _option('tiny', help="tiny, base or custom (custom honours num_layers/num_heads)")
    window_len: int = _option(DEFAULT_WINDOW_LEN, help="patch length w in samples")
    hidden_dim: int = _option(DEFAULT_HIDDEN_DIM, help="embedding width D")
    num_layers: int = _option(6, help="transformer layers (custom variant)")
    num_heads: int = _option(4, help="attention heads (custom variant)")
    codebook_size: int = _option(DEFAULT_CODEBOOK_SIZE, help="codebook size K")
    max_time_patches: int = _option(DEFAULT_MAX_TIME_PATCHES, help="temporal embedding table size")
    use_spatial_embedding: bool = _option(True, help="add coordinate embeddings to patch tokens")
    use_channel_attention: bool = _option(True, help="attend across channels within each time slice")
    use_spatial_bias: bool = _option(True, help="add the coordinate-difference attention bias")

    # Signal
    sample_rate: float = _option(DEFAULT_SAMPLE_RATE, help="target sampling rate in Hz")
    low_freq: float = _option(DEFAULT_LOW_FREQ, help="bandpass lower edge in Hz")
    high_freq: float = _option(DEFAULT_HIGH_FREQ, help="bandpass upper edge in Hz")
    amplitude_scale: float = _option(DEFAULT_AMPLITUDE_SCALE, help="global amplitude factor after filtering")

    # Training
    mask_ratio: float = _option(DEFAULT_MASK_RATIO, help="share of patches masked during pretraining")
    learning_rate: float = _option(DEFAULT_LEARNING_RATE, help="AdamW learning rate")
    weight_decay: float = _option(DEFAULT_WEIGHT_DECAY, help="AdamW weight decay")
    batch_size: int = _option(DEFAULT_BATCH_SIZE, help="maximum batch size")
    prefetch_depth: int = _option(DEFAULT_PREFETCH_DEPTH, help="batches loaded ahead (0 = synchronous)")
    workers: int = _option(1, help="logical data-parallel workers")
    steps: int = _option(500, help="pretraining steps")
    epochs: int = _option(10, help="fine-tuning epochs")
    seed: int = _option(0, help="run seed")
    seeds: Tuple[int, ...] = _option(DEFAULT_SEEDS, help="evaluation protocol seeds, comma-separated")
    linear_probe: bool = _option(False, help="freeze the encoder while fine-tuning")
    classes: int = _option(2, help="number of classes")

    # Synthetic corpus
    samples_per_layout: int = _option(200, help="synthetic samples per layout")
    duration: float = _option(4.0, help="synthetic recording length in seconds")
    noise_sigma: float = _option(1.0, help="synthetic noise standard deviation")
    pink_noise: bool = _option(False, help="shape synthetic noise as 1/f")
    layouts: str = _option('', help="synthetic layouts: channels joined by ';', layouts by '|' (empty = built-in pair)")

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def describe(cls) -> List[Tuple[str, Any, str]]:
        """(key, default, help) for every key."""
        rows = []
        for f in fields(cls):
            default = f.default_factory() if f.default is MISSING else f.default
            rows.append((f.name, default, f.metadata.get('help', '')))
        return rows

    @classmethod
    def from_values(cls, values: Dict[str, Any]) -> 'RunConfig':
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        hints = typing.get_type_hints(cls)
        return cls(**{key: coerce(key, hints[key], value) for key, value in values.items()})

    @classmethod
    def from_sources(cls, path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """File values first, then overrides (flags win)."""
        values: Dict[str, Any] = dict(read_config_file(path)) if path else {}
        values.update({key: value for key, value in (overrides or {}).items() if value is not None})
        return cls.from_values(values)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        common = dict(
            hidden_dim=self.hidden_dim,
            window_len=self.window_len,
            max_time_patches=self.max_time_patches,
            codebook_size=self.codebook_size,
            use_spatial_embedding=self.use_spatial_embedding,
            use_channel_attention=self.use_channel_attention,
            use_spatial_bias=self.use_spatial_bias,
        )
        if self.variant in VARIANT_PRESETS:
            return ModelConfig(variant=self.variant, **VARIANT_PRESETS[self.variant], **common)
        return ModelConfig(variant=self.variant, num_layers=self.num_layers, num_heads=self.num_heads, **common)

    def layout_list(self) -> Optional[Tuple[Tuple[str, ...], ...]]:
        if not self.layouts.strip():
            return None
        return tuple(
            tuple(name.strip() for name in group.split(';') if name.strip())
            for group in self.layouts.split('|') if group.strip()
        )


def coerce(key: str, kind: Any, value: Any) -> Any:
    """Convert a raw string (or already typed value) to the key's type."""
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if typing.get_origin(kind) is tuple:
            if isinstance(value, (tuple, list)):
                return tuple(int(v) for v in value)
            return tuple(int(part) for part in str(value).split(',') if part.strip())
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}")


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse a flat ``key = value`` file.

    Raises:
        ConfigError: Missing file, malformed line, duplicate or unknown key
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")

    known = set(RunConfig.keys())
    values: Dict[str, str] = {}
    with path.open(encoding='utf-8') as handle:
        for line_no, raw in enumerate(handle, start=1):
            text = raw.split('#', 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition('=')
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            if key not in known:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
            values[key] = value.strip()
    logger.debug(f"Read {len(values)} config value(s) from {path}")
    return values


def write_config_file(path: Union[str, Path], config: RunConfig) -> Path:
    """Write every key with its value so a run can be repeated."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in config.as_dict().items():
        if isinstance(value, tuple):
            value = ','.join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path
