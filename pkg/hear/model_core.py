"""
Spatially-guided transformer over heterogeneous electrode layouts.

Patch tokens are built from a per-patch temporal encoder, a coordinate-based
spatial embedding and a learnable temporal table. Channels of the same time
slice attend to each other first; the token sequence then runs through
pre-norm transformer blocks whose attention logits carry an additive bias
computed from pairwise electrode coordinate differences. One parameter set
serves every channel count and every number of time patches up to the
configured maximum.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from .constants import (
    BIAS_HIDDEN_DIM,
    COORDINATE_SCALE,
    DEFAULT_CODEBOOK_SIZE,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_MAX_TIME_PATCHES,
    DEFAULT_WINDOW_LEN,
    INIT_STD,
    VARIANT_PRESETS,
)
from .exceptions import (
    ConfigError,
    EmptyBatchError,
    NonFiniteInputError,
    ShapeMismatchError,
    TimeOverflowError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyper-parameters.

    ``tiny`` and ``base`` fix (layers, heads) to (6, 4) and (12, 8); ``custom``
    accepts any combination with hidden_dim divisible by num_heads. The three
    ``use_*`` switches reproduce the component ablations.
    """
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    num_layers: int = 6
    num_heads: int = 4
    window_len: int = DEFAULT_WINDOW_LEN
    max_time_patches: int = DEFAULT_MAX_TIME_PATCHES
    codebook_size: int = DEFAULT_CODEBOOK_SIZE
    variant: str = 'tiny'
    use_spatial_embedding: bool = True
    use_channel_attention: bool = True
    use_spatial_bias: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        preset = VARIANT_PRESETS.get(self.variant)
        if preset is None and self.variant != 'custom':
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if preset is not None and (self.num_layers, self.num_heads) != (preset['num_layers'], preset['num_heads']):
            raise ConfigError(
                f"variant {self.variant!r} requires {preset['num_layers']} layers and {preset['num_heads']} heads"
            )
        if self.window_len < 2 or self.max_time_patches < 1 or self.codebook_size < 1:
            raise ConfigError("window_len >= 2, max_time_patches >= 1 and codebook_size >= 1 are required")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @classmethod
    def tiny(cls, **overrides) -> 'ModelConfig':
        return cls(variant='tiny', **VARIANT_PRESETS['tiny'], **overrides)

    @classmethod
    def base(cls, **overrides) -> 'ModelConfig':
        return cls(variant='base', **VARIANT_PRESETS['base'], **overrides)

    @classmethod
    def custom(cls, **overrides) -> 'ModelConfig':
        return cls(variant='custom', **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})


@dataclass
class TokenSequence:
    """
    Token matrix B x (1 + C*N_t) x D, channel-major after the CLS token.
    """
    tokens: torch.Tensor
    channel_count: int
    time_patches: int
    has_cls: bool = True

    def patch_view(self) -> torch.Tensor:
        """Patch tokens reshaped to B x C x N_t x D."""
        start = 1 if self.has_cls else 0
        batch = self.tokens.shape[0]
        return self.tokens[:, start:].reshape(batch, self.channel_count, self.time_patches, -1)

    def cls(self) -> torch.Tensor:
        return self.tokens[:, :1]


@dataclass
class SpatialBias:
    """Per-head channel bias and its expansion over the token grid."""
    per_head: torch.Tensor
    expanded: torch.Tensor


@dataclass
class EncoderOutput:
    hidden: torch.Tensor
    channel_attention: Optional[torch.Tensor] = None
    layer_attention: List[torch.Tensor] = field(default_factory=list)


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _check_finite(tensor: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tensor).all():
        raise NonFiniteInputError(f"{what} contains non-finite values")


class TemporalEncoder(nn.Module):
    """Maps each w-sample patch independently to a D-vector."""

    def __init__(self, window_len: int, hidden_dim: int):
        super().__init__()
        self.window_len = window_len
        self.projection = nn.Linear(window_len, hidden_dim)
        self.norm = nn.LayerNorm(hidden_dim)
        self.activation = nn.GELU()
        self.output = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.window_len:
            raise ShapeMismatchError(f"patch length {patches.shape[-1]} != window_len {self.window_len}")
        return self.output(self.activation(self.norm(self.projection(patches))))


class SpatialEmbedding(nn.Module):
    """Two-layer MLP from head-frame coordinates to the embedding space."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(3, 2 * hidden_dim),
            nn.GELU(),
            nn.Linear(2 * hidden_dim, hidden_dim),
        )

    def forward(self, coordinates: torch.Tensor) -> torch.Tensor:
        _check_finite(coordinates, "electrode coordinates")
        return self.net(coordinates * COORDINATE_SCALE)


class SpatialBiasMLP(nn.Module):
    """Shared MLP from a coordinate difference to one logit per head."""

    def __init__(self, num_heads: int, hidden: int = BIAS_HIDDEN_DIM):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(3, hidden),
            nn.GELU(),
            nn.Linear(hidden, num_heads),
        )

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        return self.net(delta * COORDINATE_SCALE)


def compute_spatial_bias(coordinates: torch.Tensor, bias_mlp: SpatialBiasMLP) -> torch.Tensor:
    """
    Pairwise-difference attention bias.

    Args:
        coordinates: C x 3 electrode positions
        bias_mlp: Shared bias network

    Returns:
        H x C x C tensor with entry [h, e1, e2] = MLP(P[e1] - P[e2])[h]
    """
    _check_finite(coordinates, "electrode coordinates")
    delta = coordinates[:, None, :] - coordinates[None, :, :]
    return bias_mlp(delta).permute(2, 0, 1)


def expand_bias(per_head: torch.Tensor, time_patches: int, with_cls: bool = True) -> torch.Tensor:
    """
    Tile a H x C x C bias over the channel-major token grid.

    Token (e, t) sits at index e * N_t + t, so entry [(e1, t1), (e2, t2)] equals
    per_head[e1, e2] for every t1, t2. With a CLS token the first row and
    column are zero.
    """
    if per_head.dim() != 3 or per_head.shape[1] != per_head.shape[2]:
        raise ShapeMismatchError(f"per-head bias must be H x C x C, got {tuple(per_head.shape)}")
    expanded = per_head.repeat_interleave(time_patches, dim=1).repeat_interleave(time_patches, dim=2)
    if with_cls:
        expanded = nn.functional.pad(expanded, (1, 0, 1, 0))
    return expanded


def assemble_tokens(
    patch_embeddings: torch.Tensor,
    spatial: torch.Tensor,
    temporal_table: torch.Tensor,
    cls_vector: torch.Tensor,
) -> TokenSequence:
    """
    Add spatial and temporal embeddings to patch tokens and prepend CLS.

    Args:
        patch_embeddings: B x C x N_t x D
        spatial: C x D spatial embedding, broadcast over time
        temporal_table: max_time_patches x D learnable table
        cls_vector: D-vector; receives no spatial or temporal term

    Returns:
        TokenSequence of shape B x (1 + C*N_t) x D
    """
    batch, channels, time_patches, dim = patch_embeddings.shape
    if time_patches > temporal_table.shape[0]:
        raise TimeOverflowError(f"{time_patches} time patches exceed the table size {temporal_table.shape[0]}")
    if spatial.shape != (channels, dim):
        raise ShapeMismatchError(f"spatial embedding {tuple(spatial.shape)} does not match {channels} x {dim}")

    patches = patch_embeddings + spatial[None, :, None, :] + temporal_table[:time_patches][None, None, :, :]
    cls = cls_vector.reshape(1, 1, dim).expand(batch, 1, dim)
    tokens = torch.cat([cls, patches.reshape(batch, channels * time_patches, dim)], dim=1)
    return TokenSequence(tokens=tokens, channel_count=channels, time_patches=time_patches)


def substitute_mask_token(patch_embeddings: torch.Tensor, mask: torch.Tensor, mask_token: torch.Tensor) -> torch.Tensor:
    """Replace patch embeddings at masked (channel, time) positions with ``mask_token``."""
    keep = (~mask).to(patch_embeddings.dtype)[None, :, :, None]
    return patch_embeddings * keep + mask_token.reshape(1, 1, 1, -1) * (1.0 - keep)


class BiasedSelfAttention(nn.Module):
    """Multi-head self-attention with an optional additive logit bias."""

    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.proj = nn.Linear(hidden_dim, hidden_dim)

    def _split(self, x: torch.Tensor):
        batch, length, _ = x.shape
        qkv = self.qkv(x).reshape(batch, length, 3, self.num_heads, self.head_dim)
        return qkv.permute(2, 0, 3, 1, 4)

    def attention_logits(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        """QK^T / sqrt(D/H) (+ bias), shape B x H x L x L."""
        q, k, _ = self._split(x)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if bias is not None:
            logits = logits + bias
        return logits

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, length, dim = x.shape
        q, k, v = self._split(x)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if bias is not None:
            logits = logits + bias
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(batch, length, dim)
        return self.proj(out), weights


class ChannelSliceAttention(nn.Module):
    """Residual self-attention across channels, independently per time slice."""

    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden_dim)
        self.attention = BiasedSelfAttention(hidden_dim, num_heads)

    def forward(self, patch_tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if patch_tokens.dim() != 4:
            raise ShapeMismatchError(f"expected B x C x N_t x D tokens, got {tuple(patch_tokens.shape)}")
        batch, channels, time_patches, dim = patch_tokens.shape
        slices = patch_tokens.permute(0, 2, 1, 3).reshape(batch * time_patches, channels, dim)
        attended, weights = self.attention(self.norm(slices))
        slices = slices + attended
        out = slices.reshape(batch, time_patches, channels, dim).permute(0, 2, 1, 3)
        return out, weights


class TransformerBlock(nn.Module):
    """Pre-norm block: biased attention then a GELU MLP, both residual."""

    def __init__(self, hidden_dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.attention = BiasedSelfAttention(hidden_dim, num_heads)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_dim, mlp_ratio * hidden_dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * hidden_dim, hidden_dim),
        )

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        attended, weights = self.attention(self.norm1(x), bias)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, weights


class HEARModel(nn.Module):
    """Layout-agnostic EEG encoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.hidden_dim
        self.temporal_encoder = TemporalEncoder(config.window_len, dim)
        self.spatial_embedding = SpatialEmbedding(dim) if config.use_spatial_embedding else None
        self.bias_mlp = SpatialBiasMLP(config.num_heads) if config.use_spatial_bias else None
        self.channel_attention = (
            ChannelSliceAttention(dim, config.num_heads) if config.use_channel_attention else None
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers)
        )
        self.norm = nn.LayerNorm(dim)
        self.cls_token = nn.Parameter(torch.zeros(dim))
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.temporal_embedding = nn.Parameter(torch.zeros(config.max_time_patches, dim))

        self.apply(init_weights)
        for parameter in (self.cls_token, self.mask_token, self.temporal_embedding):
            nn.init.normal_(parameter, mean=0.0, std=INIT_STD)

    def temporal_encode(self, patches: torch.Tensor) -> torch.Tensor:
        """B x C x N_t x w patches -> B x C x N_t x D embeddings."""
        if patches.dim() != 4:
            raise ShapeMismatchError(f"expected B x C x N_t x w patches, got {tuple(patches.shape)}")
        return self.temporal_encoder(patches)

    def spatial_embed(self, coordinates: torch.Tensor) -> torch.Tensor:
        """C x 3 coordinates -> C x D spatial embedding (zeros when ablated)."""
        if self.spatial_embedding is None:
            _check_finite(coordinates, "electrode coordinates")
            return coordinates.new_zeros(coordinates.shape[0], self.config.hidden_dim)
        return self.spatial_embedding(coordinates)

    def spatial_bias(self, coordinates: torch.Tensor) -> Optional[torch.Tensor]:
        """H x C x C per-head bias, or None when the bias is ablated."""
        if self.bias_mlp is None:
            return None
        return compute_spatial_bias(coordinates, self.bias_mlp)

    def transformer_forward(
        self,
        tokens: torch.Tensor,
        bias: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """
        Run the biased transformer stack.

        Args:
            tokens: B x L x D sequence
            bias: H x L x L expanded bias added to every layer's logits
            return_attention: Keep each layer's attention weights

        Returns:
            Final-normed hidden states and the (possibly empty) attention maps
        """
        length = tokens.shape[1]
        if bias is not None and tuple(bias.shape[-2:]) != (length, length):
            raise ShapeMismatchError(f"bias {tuple(bias.shape)} does not match {length} tokens")
        maps: List[torch.Tensor] = []
        x = tokens
        for block in self.blocks:
            x, weights = block(x, bias)
            if return_attention:
                maps.append(weights)
        return self.norm(x), maps

    def forward(
        self,
        patches: torch.Tensor,
        coordinates: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> EncoderOutput:
        """
        Encode a layout-homogeneous batch.

        Args:
            patches: B x C x N_t x w signal patches
            coordinates: C x 3 coordinates shared by the batch
            mask: Optional C x N_t boolean mask; masked patches use the mask token
            return_attention: Return channel and per-layer attention maps

        Returns:
            EncoderOutput with hidden states B x (1 + C*N_t) x D
        """
        if patches.dim() != 4:
            raise ShapeMismatchError(f"expected B x C x N_t x w patches, got {tuple(patches.shape)}")
        batch, channels, time_patches, _ = patches.shape
        if batch == 0:
            raise EmptyBatchError("cannot encode an empty batch")
        if coordinates.shape != (channels, 3):
            raise ShapeMismatchError(f"coordinates {tuple(coordinates.shape)} do not match {channels} channels")
        if time_patches > self.config.max_time_patches:
            raise TimeOverflowError(f"{time_patches} time patches exceed {self.config.max_time_patches}")

        embeddings = self.temporal_encode(patches)
        if mask is not None:
            if tuple(mask.shape) != (channels, time_patches):
                raise ShapeMismatchError(f"mask {tuple(mask.shape)} does not match {channels} x {time_patches}")
            embeddings = substitute_mask_token(embeddings, mask, self.mask_token)

        sequence = assemble_tokens(embeddings, self.spatial_embed(coordinates), self.temporal_embedding, self.cls_token)

        channel_weights = None
        if self.channel_attention is not None:
            patch_tokens, channel_weights = self.channel_attention(sequence.patch_view())
            tokens = torch.cat([sequence.cls(), patch_tokens.reshape(batch, channels * time_patches, -1)], dim=1)
        else:
            tokens = sequence.tokens

        per_head = self.spatial_bias(coordinates)
        bias = expand_bias(per_head, time_patches, with_cls=True) if per_head is not None else None
        hidden, maps = self.transformer_forward(tokens, bias, return_attention)
        return EncoderOutput(
            hidden=hidden,
            channel_attention=channel_weights if return_attention else None,
            layer_attention=maps,
        )


class HEARClassifier(nn.Module):
    """Encoder plus a linear head on the CLS hidden state."""

    def __init__(self, config: ModelConfig, num_classes: int, linear_probe: bool = False):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        self.encoder = HEARModel(config)
        self.head = nn.Linear(config.hidden_dim, num_classes)
        init_weights(self.head)
        self.linear_probe = linear_probe
        if linear_probe:
            self.encoder.requires_grad_(False)

    def forward(self, patches: torch.Tensor, coordinates: torch.Tensor) -> torch.Tensor:
        hidden = self.encoder(patches, coordinates).hidden
        return self.head(hidden[:, 0])


def finetune_forward(model: HEARClassifier, patches: torch.Tensor, coordinates: torch.Tensor) -> torch.Tensor:
    """Class logits B x L for a layout-homogeneous batch."""
    logits = model(patches, coordinates)
    if logits.shape != (patches.shape[0], model.num_classes):
        raise ShapeMismatchError(f"unexpected logits shape {tuple(logits.shape)}")
    return logits


def count_parameters(model: nn.Module) -> int:
    return sum(parameter.numel() for parameter in model.parameters())
