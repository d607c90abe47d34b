"""
Attention arithmetic: temperature-scaled KV swap, correspondence injection
and the step gate.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch

from components.correspondence.matcher import CorrespondenceMap
from components.errors import ConfigError, DimensionMismatchError

# decoder self-attention blocks on the two finest grids of SD v1.x
DEFAULT_INJECTION_BLOCKS = (
    'up_blocks.2.attentions.1.transformer_blocks.0.attn1',
    'up_blocks.2.attentions.2.transformer_blocks.0.attn1',
    'up_blocks.3.attentions.0.transformer_blocks.0.attn1',
    'up_blocks.3.attentions.1.transformer_blocks.0.attn1',
    'up_blocks.3.attentions.2.transformer_blocks.0.attn1',
)


@dataclass(frozen=True)
class InjectionConfig:
    w: float = 0.6
    gamma: float = 0.7
    start_step: int = 49
    target_blocks: Tuple[str, ...] = DEFAULT_INJECTION_BLOCKS
    total_steps: int = 50
    score_modulated: bool = False

    def __post_init__(self):
        if self.w < 0:
            raise ConfigError(f"Injection weight must be >= 0, got {self.w}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 1 <= self.start_step <= self.total_steps:
            raise ConfigError(f"start_step must lie in [1, {self.total_steps}], got {self.start_step}")
        if not self.target_blocks:
            raise ConfigError("Injection needs at least one target block")

    @classmethod
    def from_config(cls, config: Dict, target_blocks: Optional[Sequence[str]] = None) -> 'InjectionConfig':
        options = config['injection']
        blocks = target_blocks or options.get('blocks') or DEFAULT_INJECTION_BLOCKS
        return cls(
            w=float(options['w']),
            gamma=float(options['gamma']),
            start_step=int(options['start_step']),
            target_blocks=tuple(blocks),
            total_steps=int(config['backbone']['num_steps']),
            score_modulated=bool(options.get('score_modulated', False)),
        )


def _check_heads(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> None:
    if query.dim() != 3 or key.dim() != 3 or value.dim() != 3:
        raise DimensionMismatchError("Attention tensors must be (heads, tokens, d)")
    if not (query.shape[0] == key.shape[0] == value.shape[0]):
        raise DimensionMismatchError(
            f"Head counts differ: {query.shape[0]}, {key.shape[0]}, {value.shape[0]}"
        )
    if query.shape[-1] != key.shape[-1] or key.shape[-1] != value.shape[-1]:
        raise DimensionMismatchError(
            f"Head dimensions differ: q={query.shape[-1]} k={key.shape[-1]} v={value.shape[-1]}"
        )
    if key.shape[1] != value.shape[1]:
        raise DimensionMismatchError("Keys and values have different token counts")


def attention_weights(query: torch.Tensor, key: torch.Tensor, gamma: float = 1.0,
                      scale: Optional[float] = None) -> torch.Tensor:
    """softmax(Q K^T * scale / gamma) per head; scale defaults to 1/sqrt(d)."""
    if gamma <= 0:
        raise ConfigError("gamma must be > 0")
    scale = query.shape[-1] ** -0.5 if scale is None else scale
    logits = torch.bmm(query, key.transpose(1, 2)) * (scale / gamma)
    return logits.softmax(dim=-1)


def kv_swap_attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                      gamma: float, scale: Optional[float] = None) -> torch.Tensor:
    """
    Content queries attending over style keys/values:
    softmax(Q_c K_s^T / (gamma * sqrt(d))) V_s.

    Args:
        query: (heads, N_c, d)
        key, value: (heads, N_s, d)

    Returns:
        (heads, N_c, d)
    """
    _check_heads(query, key, value)
    weights = attention_weights(query, key.to(query.dtype), gamma, scale)
    return torch.bmm(weights, value.to(query.dtype))


def inject_correspondence(feat: torch.Tensor, attn: torch.Tensor, mapping: CorrespondenceMap,
                          w: float, modulate: bool = False) -> torch.Tensor:
    """
    out[k, p] = feat[k, p] + w * attn[k, map(p)]

    Args:
        feat: (k, h, w) features on the map's source grid
        attn: (k, h_s, w_s) style attention output on the map's target grid
        modulate: scale w per location by the match's cosine score
    """
    if feat.dim() != 3 or attn.dim() != 3:
        raise DimensionMismatchError("feat and attn must be (channels, h, w)")
    if feat.shape[0] != attn.shape[0]:
        raise DimensionMismatchError(f"Channel counts differ: {feat.shape[0]} vs {attn.shape[0]}")
    if tuple(feat.shape[1:]) != mapping.source_grid:
        raise DimensionMismatchError(
            f"Map covers {mapping.source_grid}, features are {tuple(feat.shape[1:])}"
        )
    if tuple(attn.shape[1:]) != tuple(mapping.target_grid):
        raise DimensionMismatchError(
            f"Map targets {mapping.target_grid}, attention is {tuple(attn.shape[1:])}"
        )
    if w == 0:
        return feat.clone()

    channels, h, wd = feat.shape
    gathered = attn.reshape(channels, -1)[:, mapping.flat_targets().to(attn.device)]
    gathered = gathered.reshape(channels, h, wd).to(feat.dtype)
    if modulate:
        weight = w * mapping.scores.to(device=feat.device, dtype=feat.dtype)
        return feat + weight.unsqueeze(0) * gathered
    return feat + w * gathered


def injection_active(current_step: int, config: InjectionConfig) -> bool:
    return current_step >= config.start_step
