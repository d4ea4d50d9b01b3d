"""
Channel activation export and scalp maps.

Scores are the attention mass each channel receives in the channel-slice
attention layer, min-max normalised over the layout's channels.
"""
import csv
import logging
from pathlib import Path
from typing import List, Sequence, Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn as nn  # noqa: E402
from scipy.interpolate import griddata  # noqa: E402
from scipy.spatial import QhullError  # noqa: E402

from .exceptions import ConfigError, EmptyBatchError, ShapeMismatchError  # noqa: E402
from .model_core import HEARModel  # noqa: E402

logger = logging.getLogger(__name__)


def _encoder(model: nn.Module) -> HEARModel:
    return model if isinstance(model, HEARModel) else model.encoder


def channel_attention_mass(model: nn.Module, patches: torch.Tensor, coordinates: torch.Tensor) -> np.ndarray:
    """
    Mean attention received per key channel, averaged over batch, slices, heads and queries.

    The result sums to 1 over channels.
    """
    if patches.dim() != 4:
        raise ShapeMismatchError(f"expected B x C x N_t x w patches, got {tuple(patches.shape)}")
    if patches.shape[0] == 0:
        raise EmptyBatchError("cannot export activation for an empty batch")
    encoder = _encoder(model)
    if encoder.channel_attention is None:
        raise ConfigError("the model was built without channel attention")

    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        weights = encoder(patches, coordinates, return_attention=True).channel_attention
    encoder.train(was_training)
    return weights.double().mean(dim=(0, 1, 2)).cpu().numpy()


def normalize_scores(mass: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to ones."""
    low, high = float(mass.min()), float(mass.max())
    if high - low <= 1e-12 * max(1.0, abs(high)):
        return np.ones_like(mass)
    return (mass - low) / (high - low)


def export_channel_activation(model: nn.Module, patches: torch.Tensor, coordinates: torch.Tensor) -> np.ndarray:
    """Per-channel activation scores in [0, 1] for a single-layout batch."""
    return normalize_scores(channel_attention_mass(model, patches, coordinates))


def project_coordinates(coordinates: np.ndarray) -> np.ndarray:
    """Azimuthal equidistant projection about +z, scaled so the farthest electrode sits on the unit circle."""
    xyz = np.asarray(coordinates, dtype=np.float64).reshape(-1, 3)
    polar = np.arctan2(np.hypot(xyz[:, 0], xyz[:, 1]), xyz[:, 2])
    azimuth = np.arctan2(xyz[:, 1], xyz[:, 0])
    xy = np.stack([polar * np.cos(azimuth), polar * np.sin(azimuth)], axis=1)
    radius = np.linalg.norm(xy, axis=1).max() if len(xy) else 0.0
    return xy / radius if radius > 0 else xy


def write_scores_csv(path: Union[str, Path], names: Sequence[str], scores: Sequence[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['channel', 'score'])
        for name, score in zip(names, scores):
            writer.writerow([name, f"{float(score):.6f}"])
    return path


def write_history_csv(path: Union[str, Path], names: Sequence[str], rows: Sequence[Sequence[float]]) -> Path:
    """Activation history: one row per epoch, one column per channel."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['epoch', *names])
        for epoch, scores in enumerate(rows, start=1):
            writer.writerow([epoch, *(f"{float(s):.6f}" for s in scores)])
    return path


def read_scores_csv(path: Union[str, Path]) -> List[tuple]:
    with Path(path).open(newline='', encoding='utf-8') as handle:
        reader = csv.reader(handle)
        next(reader, None)
        return [(name, float(score)) for name, score in reader]


def render_topomap(
    path: Union[str, Path],
    names: Sequence[str],
    coordinates: np.ndarray,
    scores: Sequence[float],
    resolution: int = 64,
    title: str = '',
) -> Path:
    """
    Draw a scalp map as SVG.

    Scores are interpolated linearly inside the electrodes' convex hull when
    there are at least three non-collinear electrodes; electrodes are always
    drawn as labelled markers on a unit head outline.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xy = project_coordinates(coordinates)
    values = np.asarray(scores, dtype=np.float64)

    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        if len(xy) >= 3:
            grid = np.linspace(-1.0, 1.0, resolution)
            gx, gy = np.meshgrid(grid, grid)
            try:
                surface = griddata(xy, values, (gx, gy), method='linear')
                surface[gx ** 2 + gy ** 2 > 1.0] = np.nan
                ax.contourf(gx, gy, surface, levels=12, cmap='RdBu_r', vmin=0.0, vmax=1.0)
            except (QhullError, ValueError) as e:
                logger.debug(f"Skipping interpolation: {e}")

        ax.add_patch(plt.Circle((0.0, 0.0), 1.0, fill=False, linewidth=1.5))
        ax.plot([-0.1, 0.0, 0.1], [0.99, 1.1, 0.99], color='black', linewidth=1.5)
        ax.scatter(xy[:, 0], xy[:, 1], c=values, cmap='RdBu_r', vmin=0.0, vmax=1.0, edgecolors='black', zorder=3)
        for (x, y), name in zip(xy, names):
            ax.annotate(name, (x, y), textcoords='offset points', xytext=(0, 6), ha='center', fontsize=7)
        ax.set_xlim(-1.2, 1.2)
        ax.set_ylim(-1.2, 1.2)
        ax.set_aspect('equal')
        ax.axis('off')
        if title:
            ax.set_title(title)
        fig.savefig(path, format='svg')
    finally:
        plt.close(fig)

    logger.info(f"Wrote scalp map for {len(names)} channels to {path}")
    return path
