"""
Self-supervised pretraining.

The objective couples two terms on the encoder's patch outputs: a codebook
quantization loss with stop-gradients on alternate sides, and a Fourier
spectrum (amplitude and phase) reconstruction loss evaluated on masked
patches only.
"""
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .constants import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MASK_RATIO,
    DEFAULT_PREFETCH_DEPTH,
    DEFAULT_WEIGHT_DECAY,
    SPECTRUM_ABSOLUTE_EPS,
    SPECTRUM_RELATIVE_EPS,
)
from .exceptions import (
    ConfigError,
    DesyncDetectedError,
    EmptyBatchError,
    IndexOutOfRangeError,
    NonFiniteLossError,
    ShapeMismatchError,
)
from .layout_scheduler import (
    DatasetIndex,
    LayoutBatchSampler,
    LoadedBatch,
    PrefetchPipeline,
    WorkerSim,
    shard_sizes,
)
from .model_core import HEARModel, ModelConfig, init_weights, substitute_mask_token

logger = logging.getLogger(__name__)


class Codebook(nn.Module):
    """K x D prototype vectors, initialised as unit-normalised Gaussian rows."""

    def __init__(self, size: int, dim: int):
        super().__init__()
        self.vectors = nn.Parameter(F.normalize(torch.randn(size, dim), dim=-1))

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


@dataclass
class SpectrumTarget:
    amplitude: torch.Tensor
    phase: torch.Tensor


@dataclass(frozen=True)
class MaskPlan:
    mask: np.ndarray
    ratio: float
    seed: int

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())

    def as_tensor(self, device: Optional[torch.device] = None) -> torch.Tensor:
        return torch.from_numpy(self.mask).to(device)


@dataclass
class LossBreakdown:
    quantization: torch.Tensor
    spectrum: torch.Tensor
    indices: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.spectrum + self.quantization


@dataclass(frozen=True)
class StepResult:
    step: int
    quantization: float
    spectrum: float
    total: float
    learning_rate: float
    signature: str = ''

    def log_line(self) -> str:
        return (
            f"{self.step}, {self.quantization:.6f}, {self.spectrum:.6f}, "
            f"{self.total:.6f}, {self.learning_rate:.6g}, {self.signature}"
        )


def quantize(patch_repr: torch.Tensor, codebook: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Nearest codeword after l2-normalising both sides.

    Args:
        patch_repr: ... x D representations
        codebook: K x D codewords

    Returns:
        (indices with the leading shape of ``patch_repr``, selected raw codewords)
    """
    dim = codebook.shape[-1]
    if patch_repr.shape[-1] != dim:
        raise ShapeMismatchError(f"representation width {patch_repr.shape[-1]} != codebook width {dim}")

    with torch.no_grad():
        flat = patch_repr.reshape(-1, dim)
        zero = flat.norm(dim=-1) == 0
        p = F.normalize(flat, dim=-1)
        v = F.normalize(codebook, dim=-1)
        distances = (p * p).sum(-1, keepdim=True) + (v * v).sum(-1)[None, :] - 2.0 * p @ v.T
        indices = distances.argmin(dim=-1)
        if zero.any():
            logger.warning(f"Quantizing {int(zero.sum())} zero representation(s); they map to codeword 0")
            indices = indices.masked_fill(zero, 0)
    return indices.reshape(patch_repr.shape[:-1]), codebook[indices].reshape(patch_repr.shape)


def quantization_terms(
    encoder_outputs: torch.Tensor,
    codebook: torch.Tensor,
    indices: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Codebook term and commitment term, each summed over patches.

    The codebook term ||sg(l2 x) - l2 v_z||^2 only moves the codebook; the
    commitment term ||l2 x - sg(l2 v_z)|| only moves the encoder outputs.
    """
    size, dim = codebook.shape
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= size):
        raise IndexOutOfRangeError(f"codeword index outside 0..{size - 1}")
    x = F.normalize(encoder_outputs.reshape(-1, dim), dim=-1)
    v = F.normalize(codebook[indices.reshape(-1)], dim=-1)
    codebook_term = ((x.detach() - v) ** 2).sum(dim=-1).sum()
    commitment_term = torch.linalg.vector_norm(x - v.detach(), dim=-1).sum()
    return codebook_term, commitment_term


def quantization_loss(encoder_outputs: torch.Tensor, codebook: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    codebook_term, commitment_term = quantization_terms(encoder_outputs, codebook, indices)
    return codebook_term + commitment_term


def spectrum_bins(window_len: int) -> int:
    return window_len // 2 + 1


def spectrum_targets(patches: torch.Tensor) -> SpectrumTarget:
    """
    Amplitude (|DFT| / w) and principal phase of each patch.

    Bins whose amplitude is below max(1e-12, 1e-5 x the patch's largest bin)
    get phase 0.
    """
    window_len = patches.shape[-1]
    if window_len < 2:
        raise ShapeMismatchError(f"patches need at least 2 samples, got {window_len}")
    spectrum = torch.fft.rfft(patches, dim=-1)
    amplitude = spectrum.abs() / window_len
    phase = torch.angle(spectrum)
    phase = torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)
    threshold = (SPECTRUM_RELATIVE_EPS * amplitude.amax(dim=-1, keepdim=True)).clamp_min(SPECTRUM_ABSOLUTE_EPS)
    phase = torch.where(amplitude < threshold, torch.zeros_like(phase), phase)
    return SpectrumTarget(amplitude=amplitude, phase=phase)


def reconstruct_patches(target: SpectrumTarget, window_len: int) -> torch.Tensor:
    """Inverse of ``spectrum_targets`` up to the sub-threshold phase reset."""
    spectrum = torch.polar(target.amplitude * window_len, target.phase)
    return torch.fft.irfft(spectrum, n=window_len, dim=-1)


def wrap_phase(delta: torch.Tensor) -> torch.Tensor:
    """Map phase differences into (-pi, pi]."""
    return math.pi - torch.remainder(math.pi - delta, 2 * math.pi)


def spectrum_loss(
    predicted_amplitude: torch.Tensor,
    predicted_phase: torch.Tensor,
    amplitude: torch.Tensor,
    phase: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Squared amplitude error plus the norm of the wrapped phase error.

    Args:
        predicted_amplitude, predicted_phase, amplitude, phase: ... x F tensors
        mask: Boolean tensor over the leading dims; only True patches count

    Returns:
        Scalar sum over the selected patches
    """
    shapes = {tuple(t.shape) for t in (predicted_amplitude, predicted_phase, amplitude, phase)}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"spectrum shapes differ: {sorted(shapes)}")
    amplitude_error = ((predicted_amplitude - amplitude) ** 2).sum(dim=-1)
    phase_error = torch.linalg.vector_norm(wrap_phase(predicted_phase - phase), dim=-1)
    per_patch = amplitude_error + phase_error
    if mask is None:
        return per_patch.sum()
    if tuple(mask.shape) != tuple(per_patch.shape):
        raise ShapeMismatchError(f"mask {tuple(mask.shape)} does not cover patches {tuple(per_patch.shape)}")
    return per_patch[mask].sum()


def make_mask_plan(channels: int, time_patches: int, ratio: float = DEFAULT_MASK_RATIO, seed: int = 0) -> MaskPlan:
    """Mask floor(ratio * C * N_t + 0.5) patches chosen uniformly without replacement."""
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    total = channels * time_patches
    count = math.floor(Fraction(str(ratio)) * total + Fraction(1, 2))
    rng = np.random.default_rng(seed)
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=count, replace=False)] = True
    return MaskPlan(mask=flat.reshape(channels, time_patches), ratio=ratio, seed=seed)


def mask_patches(
    patch_embeddings: torch.Tensor,
    ratio: float,
    seed: int,
    mask_token: torch.Tensor,
) -> Tuple[torch.Tensor, MaskPlan]:
    """Replace a seeded share of B x C x N_t x D patch embeddings with the mask token."""
    _, channels, time_patches, _ = patch_embeddings.shape
    plan = make_mask_plan(channels, time_patches, ratio, seed)
    masked = substitute_mask_token(patch_embeddings, plan.as_tensor(patch_embeddings.device), mask_token)
    return masked, plan


class PretrainingModel(nn.Module):
    """Encoder, codebook and linear spectrum head trained jointly."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = HEARModel(config)
        self.codebook = Codebook(config.codebook_size, config.hidden_dim)
        self.bins = spectrum_bins(config.window_len)
        self.spectrum_head = nn.Linear(config.hidden_dim, 2 * self.bins)
        init_weights(self.spectrum_head)

    def patch_outputs(self, patches: torch.Tensor, coordinates: torch.Tensor, plan: Optional[MaskPlan]) -> torch.Tensor:
        """Transformer outputs of the patch tokens, B x C x N_t x D."""
        batch, channels, time_patches, _ = patches.shape
        mask = plan.as_tensor(patches.device) if plan is not None else None
        hidden = self.encoder(patches, coordinates, mask=mask).hidden
        return hidden[:, 1:].reshape(batch, channels, time_patches, -1)

    def predict_spectrum(self, outputs: torch.Tensor) -> SpectrumTarget:
        predicted = self.spectrum_head(outputs)
        return SpectrumTarget(amplitude=predicted[..., :self.bins], phase=predicted[..., self.bins:])

    def compute_losses(self, patches: torch.Tensor, coordinates: torch.Tensor, plan: MaskPlan) -> LossBreakdown:
        outputs = self.patch_outputs(patches, coordinates, plan)
        indices, _ = quantize(outputs, self.codebook.vectors)
        quantization = quantization_loss(outputs, self.codebook.vectors, indices)

        predicted = self.predict_spectrum(outputs)
        target = spectrum_targets(patches)
        mask = plan.as_tensor(patches.device)[None].expand(patches.shape[0], -1, -1)
        spectrum = spectrum_loss(predicted.amplitude, predicted.phase, target.amplitude, target.phase, mask)
        return LossBreakdown(quantization=quantization, spectrum=spectrum, indices=indices)


def build_optimizer(
    model: nn.Module,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    total_steps: int = 1,
):
    """AdamW with cosine decay over ``total_steps``."""
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, total_steps))
    return optimizer, scheduler


def _current_lr(optimizer: torch.optim.Optimizer) -> float:
    return float(optimizer.param_groups[0]['lr'])


def _check_finite(breakdown: LossBreakdown, step: int) -> None:
    if not torch.isfinite(breakdown.total):
        logger.error(
            f"Non-finite loss at step {step}: L_Q={float(breakdown.quantization)}, L_S={float(breakdown.spectrum)}"
        )
        raise NonFiniteLossError(f"non-finite loss at step {step}")


def pretrain_step(
    model: PretrainingModel,
    optimizer: torch.optim.Optimizer,
    patches: torch.Tensor,
    coordinates: torch.Tensor,
    plan: MaskPlan,
    scheduler=None,
    step: int = 0,
    signature: str = '',
) -> StepResult:
    """
    One optimisation step on a layout-homogeneous batch.

    Raises:
        NonFiniteLossError: Loss is NaN or infinite; parameters are left untouched
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    breakdown = model.compute_losses(patches, coordinates, plan)
    _check_finite(breakdown, step)

    breakdown.total.backward()
    learning_rate = _current_lr(optimizer)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return StepResult(
        step=step,
        quantization=float(breakdown.quantization),
        spectrum=float(breakdown.spectrum),
        total=float(breakdown.total),
        learning_rate=learning_rate,
        signature=signature,
    )


def data_parallel_step(
    model: PretrainingModel,
    optimizer: torch.optim.Optimizer,
    shards: Sequence[torch.Tensor],
    coordinates: torch.Tensor,
    plan: MaskPlan,
    scheduler=None,
    step: int = 0,
    signature: str = '',
) -> StepResult:
    """
    Logical-worker step: per-shard gradients are summed, then applied once.

    Both losses are sums over patches, so the summed shard gradients equal the
    full-batch gradient.
    """
    model.train()
    parameters = [p for p in model.parameters() if p.requires_grad]
    summed = [torch.zeros_like(p) for p in parameters]
    quantization = spectrum = 0.0

    for shard in shards:
        if shard.shape[0] == 0:
            continue
        breakdown = model.compute_losses(shard, coordinates, plan)
        _check_finite(breakdown, step)
        grads = torch.autograd.grad(breakdown.total, parameters, allow_unused=True)
        for acc, grad in zip(summed, grads):
            if grad is not None:
                acc.add_(grad)
        quantization += float(breakdown.quantization)
        spectrum += float(breakdown.spectrum)

    optimizer.zero_grad(set_to_none=True)
    for parameter, grad in zip(parameters, summed):
        parameter.grad = grad
    learning_rate = _current_lr(optimizer)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return StepResult(step, quantization, spectrum, quantization + spectrum, learning_rate, signature)


class Pretrainer:
    """
    Runs pretraining over epochs of layout-homogeneous batches.

    Each step draws the next planned batch through the prefetch pipeline,
    masks it with a per-step seed and appends one line to the training log.
    """

    def __init__(
        self,
        model: PretrainingModel,
        dataset,
        batch_size: int = DEFAULT_BATCH_SIZE,
        mask_ratio: float = DEFAULT_MASK_RATIO,
        learning_rate: float = DEFAULT_LEARNING_RATE,
        weight_decay: float = DEFAULT_WEIGHT_DECAY,
        prefetch_depth: int = DEFAULT_PREFETCH_DEPTH,
        worker_count: int = 1,
        seed: int = 0,
        index: Optional[DatasetIndex] = None,
    ):
        self.model = model
        self.dataset = dataset
        self.index = index if index is not None else dataset.index
        self.batch_size = batch_size
        self.mask_ratio = mask_ratio
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.prefetch_depth = prefetch_depth
        self.worker_count = worker_count
        self.seed = seed
        self.history: List[StepResult] = []

    def mask_seed(self, step: int) -> int:
        return self.seed * 1_000_003 + step

    def _step(self, optimizer, scheduler, loaded: LoadedBatch, step: int) -> StepResult:
        dtype = next(self.model.parameters()).dtype
        patches = loaded.patches.to(dtype)
        coordinates = loaded.coordinates.to(dtype)
        _, channels, time_patches, _ = patches.shape
        plan = make_mask_plan(channels, time_patches, self.mask_ratio, self.mask_seed(step))
        if self.worker_count > 1:
            shards = torch.split(patches, shard_sizes(patches.shape[0], self.worker_count))
            return data_parallel_step(
                self.model, optimizer, shards, coordinates, plan, scheduler, step, loaded.signature
            )
        return pretrain_step(self.model, optimizer, patches, coordinates, plan, scheduler, step, loaded.signature)

    def train(self, steps: int, log_path: Optional[Union[str, Path]] = None) -> List[StepResult]:
        """
        Run ``steps`` optimisation steps, cycling through epochs as needed.

        Args:
            steps: Number of steps; 0 only creates the (empty) log
            log_path: Append-only training log

        Returns:
            One StepResult per step
        """
        if steps < 0:
            raise ConfigError(f"steps must be >= 0, got {steps}")
        log_handle = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log_handle = open(log_path, 'a', encoding='utf-8')

        try:
            if steps == 0:
                return self.history
            if len(self.index) == 0:
                raise EmptyBatchError("cannot pretrain on an empty dataset")

            optimizer, scheduler = build_optimizer(self.model, self.learning_rate, self.weight_decay, steps)
            step = 0
            epoch = 0
            logger.info(f"Pretraining for {steps} steps on {len(self.index)} samples")
            sampler = LayoutBatchSampler(self.index, self.batch_size, self.seed)
            while step < steps:
                sampler.set_epoch(epoch)
                plan = sampler.plan()
                workers = WorkerSim(self.index, self.worker_count, self.batch_size, self.seed + epoch) \
                    if self.worker_count > 1 else None
                pipeline = PrefetchPipeline(plan.batches, self.dataset.load_batch, self.prefetch_depth)
                try:
                    for position, loaded in enumerate(pipeline, start=1):
                        step += 1
                        if workers is not None:
                            broadcast = workers.sync_layout_index(position)
                            if broadcast != loaded.signature:
                                raise DesyncDetectedError(step, 0, broadcast, loaded.signature)
                        result = self._step(optimizer, scheduler, loaded, step)
                        self.history.append(result)
                        if log_handle is not None:
                            log_handle.write(result.log_line() + '\n')
                            log_handle.flush()
                        logger.debug(result.log_line())
                        if step >= steps:
                            break
                finally:
                    pipeline.close()
                epoch += 1
                logger.info(f"Finished epoch {epoch} at step {step}")
        finally:
            if log_handle is not None:
                log_handle.close()
        return self.history
