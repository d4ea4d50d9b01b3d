"""
Synthetic EEG corpus with planted, hemisphere-keyed class structure.

Class c adds a (10 + 2c) Hz sinusoid to the left-hemisphere channels (x < 0)
for even c and to the right-hemisphere channels (x > 0) for odd c, over
Gaussian (optionally pink) noise. Output is a regular dataset container.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .channel_dictionary import GlobalDictionary, LayoutMapping, map_layout
from .constants import DEFAULT_AMPLITUDE_SCALE, DEFAULT_SAMPLE_RATE, DEFAULT_WINDOW_LEN
from .container import DatasetContainer, SubsetInfo, write_manifest, write_subset
from .exceptions import ConfigError, EmptyLayoutError, UnresolvableLayoutError
from .signal_pipeline import Recording, apply_scale, segment_patches

logger = logging.getLogger(__name__)

PLANTED_AMPLITUDE = 3.0
BASE_FREQUENCY = 10.0
FREQUENCY_STEP = 2.0

# Two disjoint layouts, each spanning both hemispheres.
DEFAULT_LAYOUTS: Tuple[Tuple[str, ...], ...] = (
    ('Fp1', 'Fp2', 'C3', 'C4', 'O1', 'O2'),
    ('F7', 'F8', 'T7', 'T8', 'P3', 'P4'),
)


@dataclass(frozen=True)
class SynthSpec:
    layouts: Tuple[Tuple[str, ...], ...] = DEFAULT_LAYOUTS
    samples_per_layout: int = 200
    classes: int = 2
    sample_rate: float = DEFAULT_SAMPLE_RATE
    duration: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0
    pink_noise: bool = False
    random_phase: bool = True
    window_len: int = DEFAULT_WINDOW_LEN

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class OracleResult:
    accuracy: float
    y_true: List[int] = field(default_factory=list)
    y_pred: List[int] = field(default_factory=list)


def class_frequency(label: int) -> float:
    return BASE_FREQUENCY + FREQUENCY_STEP * label


def planted_channels(coordinates: np.ndarray, label: int) -> np.ndarray:
    """Boolean mask of channels that carry class ``label``'s sinusoid."""
    x = coordinates[:, 0]
    return x < 0 if label % 2 == 0 else x > 0


def resolve_layout(dictionary: GlobalDictionary, names: Sequence[str], subset_id: str = '') -> LayoutMapping:
    """
    Raises:
        UnresolvableLayoutError: A channel is not an EEG dictionary electrode or fewer than two remain
    """
    try:
        mapping = map_layout(dictionary, list(names), subset_id)
    except EmptyLayoutError as e:
        raise UnresolvableLayoutError(str(e))
    if mapping.dropped or mapping.channel_count < 2:
        raise UnresolvableLayoutError(f"layout {list(names)} does not resolve to at least two EEG electrodes")
    return mapping


def _noise(rng: np.random.Generator, channels: int, length: int, sigma: float, pink: bool) -> np.ndarray:
    white = rng.standard_normal((channels, length))
    if not pink:
        return sigma * white
    spectrum = np.fft.rfft(white, axis=1)
    freqs = np.arange(spectrum.shape[1], dtype=np.float64)
    freqs[0] = np.inf
    shaped = np.fft.irfft(spectrum / np.sqrt(freqs), n=length, axis=1)
    shaped /= shaped.std(axis=1, keepdims=True)
    return sigma * shaped


def synthesize_sample(
    rng: np.random.Generator,
    spec: SynthSpec,
    coordinates: np.ndarray,
    label: int,
) -> np.ndarray:
    """One C x T recording of class ``label``."""
    channels, length = coordinates.shape[0], spec.num_samples
    data = _noise(rng, channels, length, spec.noise_sigma, spec.pink_noise) if spec.noise_sigma > 0 \
        else np.zeros((channels, length))
    phase = rng.uniform(0.0, 2 * math.pi) if spec.random_phase else 0.0
    t = np.arange(length) / spec.sample_rate
    wave = PLANTED_AMPLITUDE * np.sin(2 * math.pi * class_frequency(label) * t + phase)
    data[planted_channels(coordinates, label)] += wave
    return data


def balanced_labels(rng: np.random.Generator, count: int, classes: int) -> np.ndarray:
    return rng.permutation(np.arange(count) % classes)


def generate(spec: SynthSpec, dictionary: GlobalDictionary, root: Union[str, Path]) -> List[SubsetInfo]:
    """
    Write a container with one subset per layout.

    Args:
        spec: Corpus description
        dictionary: Dictionary that every layout must resolve in
        root: Output directory

    Returns:
        Manifest entries in layout order

    Raises:
        UnresolvableLayoutError: A layout has unknown or non-EEG channels
    """
    if spec.num_samples < spec.window_len:
        raise ConfigError(f"{spec.duration} s at {spec.sample_rate} Hz is shorter than one {spec.window_len}-sample patch")

    mappings = [resolve_layout(dictionary, names, f"synth{i:02d}") for i, names in enumerate(spec.layouts)]
    rng = np.random.default_rng(spec.seed)
    subsets = []
    for mapping, names in zip(mappings, spec.layouts):
        labels = balanced_labels(rng, spec.samples_per_layout, spec.classes)
        samples = np.stack([synthesize_sample(rng, spec, mapping.coordinates, int(label)) for label in labels]) \
            if len(labels) else np.zeros((0, len(names), spec.num_samples))
        subsets.append(write_subset(root, mapping.subset_id, samples, names, spec.sample_rate, labels.tolist()))
        logger.info(f"Generated subset {mapping.subset_id}: {len(labels)} samples over {len(names)} channels")

    write_manifest(root, subsets)
    return subsets


def bandpower_oracle(container: DatasetContainer, dictionary: GlobalDictionary, classes: int = 2) -> OracleResult:
    """
    Classify every labelled sample by planted-band power alone.

    For each class the mean power at its frequency over its planted hemisphere
    is compared; the largest wins.
    """
    y_true: List[int] = []
    y_pred: List[int] = []
    for info in container.subsets:
        mapping = map_layout(dictionary, info.channel_names, info.subset_id)
        header = container.header(info.subset_id)
        freqs = np.fft.rfftfreq(header.samples_per_channel, d=1.0 / info.sample_rate)
        for offset in range(info.num_samples):
            label = container.label(info.subset_id, offset)
            if label is None:
                continue
            data = container.read_sample(info.subset_id, offset)[list(mapping.kept_indices)]
            power = np.abs(np.fft.rfft(data, axis=1)) ** 2
            scores = []
            for c in range(classes):
                channels = planted_channels(mapping.coordinates, c)
                bin_index = int(np.argmin(np.abs(freqs - class_frequency(c))))
                scores.append(power[channels, bin_index].mean() if channels.any() else -np.inf)
            y_true.append(label)
            y_pred.append(int(np.argmax(scores)))

    accuracy = float(np.mean(np.asarray(y_true) == np.asarray(y_pred))) if y_true else 0.0
    logger.info(f"Bandpower oracle accuracy {accuracy:.4f} on {len(y_true)} samples")
    return OracleResult(accuracy=accuracy, y_true=y_true, y_pred=y_pred)


def overfit_fixture(
    dictionary: GlobalDictionary,
    layout: Sequence[str] = DEFAULT_LAYOUTS[0],
    samples: int = 8,
    window_len: int = DEFAULT_WINDOW_LEN,
    scale: float = DEFAULT_AMPLITUDE_SCALE,
    dtype: torch.dtype = torch.float32,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Small noiseless batch for overfitting checks.

    Signals are scaled and segmented without filtering.

    Returns:
        (patches B x C x N_t x w, coordinates C x 3, labels B)
    """
    spec = SynthSpec(layouts=(tuple(layout),), samples_per_layout=samples, noise_sigma=0.0, random_phase=False,
                     window_len=window_len)
    mapping = resolve_layout(dictionary, layout)
    rng = np.random.default_rng(spec.seed)
    labels = balanced_labels(rng, samples, spec.classes)
    patches = []
    for label in labels:
        rec = apply_scale(Recording(synthesize_sample(rng, spec, mapping.coordinates, int(label)), spec.sample_rate), scale)
        patches.append(segment_patches(rec, window_len).patches)
    return (
        torch.tensor(np.stack(patches), dtype=dtype),
        torch.tensor(mapping.coordinates, dtype=dtype),
        torch.tensor(labels, dtype=torch.long),
    )
