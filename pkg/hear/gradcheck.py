"""
Central finite-difference checks of the analytic gradients.

Everything runs in float64. A sampled subset of entries of each checked
tensor is perturbed by +/- step and the numeric slope compared with autograd
using |a - n| / max(|a|, |n|, floor).
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import torch

from .constants import GRADCHECK_FLOOR, GRADCHECK_STEP, GRADCHECK_TOLERANCE
from .model_core import HEARModel, ModelConfig
from .pretraining import PretrainingModel, make_mask_plan, quantization_loss, quantize, spectrum_loss

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES_PER_TENSOR = 12


@dataclass(frozen=True)
class GradcheckReport:
    name: str
    max_relative_error: float
    checked: int
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = GRADCHECK_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    name: str,
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    generator: torch.Generator,
    samples_per_tensor: int = DEFAULT_SAMPLES_PER_TENSOR,
    step: float = GRADCHECK_STEP,
) -> GradcheckReport:
    """
    Compare autograd with central differences of a scalar function.

    Args:
        name: Label for the report
        fn: Zero-argument function returning a scalar built from ``tensors``
        tensors: Leaf tensors with requires_grad set
        generator: Chooses which entries get perturbed
        samples_per_tensor: Entries checked per tensor (all when smaller)
        step: Finite-difference step

    Returns:
        Report with the largest relative error seen
    """
    analytic = torch.autograd.grad(fn(), list(tensors), allow_unused=True)
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for tensor, grad in zip(tensors, analytic):
            flat = tensor.view(-1)
            grad_flat = grad.reshape(-1) if grad is not None else torch.zeros_like(flat)
            count = min(flat.numel(), samples_per_tensor)
            for position in torch.randperm(flat.numel(), generator=generator)[:count].tolist():
                original = flat[position].item()
                flat[position] = original + step
                plus = fn().item()
                flat[position] = original - step
                minus = fn().item()
                flat[position] = original
                numeric = (plus - minus) / (2 * step)
                worst = max(worst, relative_error(grad_flat[position].item(), numeric))
                checked += 1
    report = GradcheckReport(name=name, max_relative_error=worst, checked=checked)
    logger.debug(f"Gradcheck {name}: max relative error {worst:.3e} over {checked} entries")
    return report


def _projection(generator: torch.Generator, shape) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=torch.float64)


def micro_config() -> ModelConfig:
    return ModelConfig.custom(
        hidden_dim=8, num_layers=1, num_heads=2, window_len=16, max_time_patches=4, codebook_size=8,
    )


def run_standard_checks(
    seed: int = 0,
    channels: int = 3,
    time_patches: int = 2,
    samples_per_tensor: int = DEFAULT_SAMPLES_PER_TENSOR,
) -> List[GradcheckReport]:
    """
    Gradient checks for every differentiable component.

    Covers the spatial MLP, bias MLP, channel attention, temporal encoder, the
    quantization loss, the spectrum loss and the full pretraining objective.
    """
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    config = micro_config()
    model = HEARModel(config).double()
    dim, window = config.hidden_dim, config.window_len

    coordinates = (0.08 * _projection(generator, (channels, 3))).requires_grad_()
    patches = _projection(generator, (1, channels, time_patches, window)).requires_grad_()
    reports: List[GradcheckReport] = []

    def check(name, fn, tensors):
        reports.append(check_gradients(name, fn, tensors, generator, samples_per_tensor))

    weights_s = _projection(generator, (channels, dim))
    check(
        'spatial_mlp',
        lambda: (model.spatial_embed(coordinates) * weights_s).sum(),
        [coordinates, *model.spatial_embedding.parameters()],
    )

    weights_h = _projection(generator, (1, 1 + channels * time_patches, dim))
    check(
        'bias_mlp',
        lambda: (model(patches, coordinates).hidden * weights_h).sum(),
        [coordinates, *model.bias_mlp.parameters()],
    )

    slice_input = _projection(generator, (1, channels, time_patches, dim)).requires_grad_()
    weights_c = _projection(generator, (1, channels, time_patches, dim))
    check(
        'channel_attention',
        lambda: (model.channel_attention(slice_input)[0] * weights_c).sum(),
        [slice_input, *model.channel_attention.parameters()],
    )

    weights_t = _projection(generator, (1, channels, time_patches, dim))
    check(
        'temporal_encoder',
        lambda: (model.temporal_encode(patches) * weights_t).sum(),
        [patches, *model.temporal_encoder.parameters()],
    )

    check(
        'transformer',
        lambda: (model(patches, coordinates).hidden * weights_h).sum(),
        [p for block in model.blocks for p in block.parameters()],
    )

    outputs = _projection(generator, (channels * time_patches, dim)).requires_grad_()
    codebook = _projection(generator, (config.codebook_size, dim)).requires_grad_()
    indices, _ = quantize(outputs, codebook)
    check('quantization_loss', lambda: quantization_loss(outputs, codebook, indices), [outputs, codebook])

    bins = window // 2 + 1
    predicted_amplitude = _projection(generator, (channels, time_patches, bins)).requires_grad_()
    predicted_phase = _projection(generator, (channels, time_patches, bins)).requires_grad_()
    amplitude = _projection(generator, (channels, time_patches, bins)).abs()
    phase = _projection(generator, (channels, time_patches, bins)).clamp(-3.0, 3.0)
    mask = make_mask_plan(channels, time_patches, 0.5, seed).as_tensor()
    check(
        'spectrum_loss',
        lambda: spectrum_loss(predicted_amplitude, predicted_phase, amplitude, phase, mask),
        [predicted_amplitude, predicted_phase],
    )

    pretraining = PretrainingModel(config).double()
    micro_patches = _projection(generator, (2, 2, time_patches, window))
    micro_coordinates = 0.08 * _projection(generator, (2, 3))
    plan = make_mask_plan(2, time_patches, 0.5, seed)
    check(
        'pretraining_objective',
        lambda: pretraining.compute_losses(micro_patches, micro_coordinates, plan).total,
        list(pretraining.parameters()),
    )

    for report in reports:
        logger.info(f"{report.name}: max relative error {report.max_relative_error:.3e} ({report.checked} entries)")
    return reports


def summarize_reports(reports: Sequence[GradcheckReport]) -> Tuple[float, bool]:
    worst = max((r.max_relative_error for r in reports), default=0.0)
    return worst, all(r.passed for r in reports)
