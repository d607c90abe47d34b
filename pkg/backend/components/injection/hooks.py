"""
Sampling hooks: style banks recorded during inversion, KV swap and
correspondence injection.
"""

from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch

from components.backbone.hooks import (
    AttentionContext,
    AttentionHook,
    AttentionRecorder,
    grid_to_heads,
    heads_to_grid,
)
from components.correspondence.matcher import CorrespondenceMap
from components.errors import InvalidLocatorError
from .attention import InjectionConfig, inject_correspondence, injection_active, kv_swap_attention


def sampling_to_inversion_step(step: int, total_steps: int) -> int:
    """Sampling step k runs at the timestep of inversion step T - k + 1."""
    return total_steps - step + 1


class StyleBank:
    """
    Attention tensors of one stream, recorded while that stream is inverted.

    Keys and values are kept for every step; attention outputs only for the
    steps whose sampling counterpart has injection enabled.
    """

    def __init__(self, blocks: Sequence[str], total_steps: int,
                 output_steps: Optional[Iterable[int]] = None, device: Optional[str] = 'cpu'):
        self.blocks = tuple(blocks)
        self.total_steps = total_steps
        self.kv = AttentionRecorder(fields=('key', 'value'), device=device,
                                    blocks=self.blocks, phases=['invert'])
        output_steps = list(output_steps or [])
        self.outputs = AttentionRecorder(fields=('output',), device=device,
                                         blocks=self.blocks, phases=['invert'],
                                         steps=output_steps) if output_steps else None

    @classmethod
    def for_injection(cls, config: InjectionConfig, device: Optional[str] = 'cpu') -> 'StyleBank':
        output_steps = [
            sampling_to_inversion_step(k, config.total_steps)
            for k in range(config.start_step, config.total_steps + 1)
        ]
        return cls(config.target_blocks, config.total_steps, output_steps, device)

    def hooks(self) -> List[AttentionHook]:
        return [self.kv] + ([self.outputs] if self.outputs is not None else [])

    def key_value(self, block: str, timestep: int) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        return self.kv.get(block, timestep, 'key'), self.kv.get(block, timestep, 'value')

    def output(self, block: str, timestep: int) -> Optional[torch.Tensor]:
        if self.outputs is None:
            return None
        return self.outputs.get(block, timestep, 'output')

    def grid(self, block: str) -> Tuple[int, int]:
        return self.kv.grids[block]

    def __len__(self) -> int:
        return len(self.kv.records)


class KVSwapHook(AttentionHook):
    """Replace the attention output with content queries over banked keys/values."""

    def __init__(self, bank: StyleBank, gamma: float, blocks: Optional[Iterable[str]] = None):
        super().__init__(blocks=blocks if blocks is not None else bank.blocks, phases=['sample'])
        self.bank = bank
        self.gamma = gamma
        self.calls: Dict[Tuple[str, int], int] = {}

    def __call__(self, ctx: AttentionContext) -> Optional[torch.Tensor]:
        key, value = self.bank.key_value(ctx.block, ctx.timestep)
        if key is None or value is None:
            raise InvalidLocatorError(
                f"No banked K/V for {ctx.block} at t={ctx.timestep}; "
                f"the bank was recorded with a different schedule or block set"
            )
        self.calls[(ctx.block, ctx.step)] = self.calls.get((ctx.block, ctx.step), 0) + 1
        device = ctx.query.device
        return kv_swap_attention(ctx.query, key.to(device), value.to(device), self.gamma, ctx.scale)


class CorrespondenceInjectionHook(AttentionHook):
    """
    Adds w * (style attention output at the matched location) to the current
    output. Runs after KVSwapHook in the same registry.
    """

    def __init__(self, bank: StyleBank, mapping: CorrespondenceMap, config: InjectionConfig):
        super().__init__(blocks=config.target_blocks, phases=['sample'])
        self.bank = bank
        self.mapping = mapping
        self.config = config
        self._resampled: Dict[Tuple[Tuple[int, int], Tuple[int, int]], CorrespondenceMap] = {}
        self.applied = 0

    def _map_for(self, source_grid: Tuple[int, int], target_grid: Tuple[int, int]) -> CorrespondenceMap:
        key = (tuple(source_grid), tuple(target_grid))
        if key not in self._resampled:
            self._resampled[key] = self.mapping.resample(*key)
        return self._resampled[key]

    def __call__(self, ctx: AttentionContext) -> Optional[torch.Tensor]:
        if not injection_active(ctx.step, self.config) or self.config.w == 0:
            return None
        style_out = self.bank.output(ctx.block, ctx.timestep)
        if style_out is None:
            raise InvalidLocatorError(
                f"No banked attention output for {ctx.block} at t={ctx.timestep} (sampling step {ctx.step})"
            )

        style_grid = self.bank.grid(ctx.block)
        mapping = self._map_for(ctx.grid, style_grid)
        feat = heads_to_grid(ctx.output, ctx.grid)
        attn = heads_to_grid(style_out.to(ctx.output.device), style_grid)
        out = inject_correspondence(feat, attn, mapping, self.config.w, self.config.score_modulated)
        self.applied += 1
        return grid_to_heads(out, ctx.heads)
