"""
Attention hooks
===============
Hook points on the U-Net decoder's self-attention blocks.

Every decoder self-attention module gets a ``HookedAttnProcessor``. The
processor computes Q, K, V and the default attention output, then hands an
``AttentionContext`` to each hook of the registry that is active for the
current thread. A hook returning ``None`` is a pure observer; returning a
tensor replaces the attention output (before the output projection).

Registries are activated through a ContextVar, so concurrent samplings on a
shared U-Net never see each other's hooks.
"""

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import torch

from components.errors import HookConfigurationError

logger = logging.getLogger(__name__)

_ACTIVE_REGISTRY: contextvars.ContextVar = contextvars.ContextVar('cocodiff_hooks', default=None)


@dataclass
class AttentionContext:
    """What a hook sees for one (block, step) evaluation. Tensors are (heads, tokens, d)."""
    block: str
    phase: str                  # 'invert' | 'sample' | 'probe'
    step: int                   # 1-based step index within the phase
    timestep: int               # training-timestep the U-Net is evaluated at
    query: torch.Tensor
    key: torch.Tensor
    value: torch.Tensor
    output: torch.Tensor
    heads: int
    grid: Tuple[int, int]       # spatial layout of the query tokens
    scale: float                # default 1/sqrt(d)


class AttentionHook:
    """
    Base class for attention hooks.

    Args:
        blocks: block names the hook runs on (None = every decoder block)
        phases: phases it runs in (None = all)
        steps: step indices it runs at (None = all)
    """

    def __init__(
        self,
        blocks: Optional[Iterable[str]] = None,
        phases: Optional[Iterable[str]] = None,
        steps: Optional[Iterable[int]] = None
    ):
        self.blocks = None if blocks is None else frozenset(blocks)
        self.phases = None if phases is None else frozenset(phases)
        self.steps = None if steps is None else frozenset(steps)

    def wants(self, block: str, phase: str, step: int) -> bool:
        if self.blocks is not None and block not in self.blocks:
            return False
        if self.phases is not None and phase not in self.phases:
            return False
        if self.steps is not None and step not in self.steps:
            return False
        return True

    def __call__(self, ctx: AttentionContext) -> Optional[torch.Tensor]:
        raise NotImplementedError


class HookRegistry:
    """Ordered hook set plus the step bookkeeping the sampling loop updates."""

    def __init__(self, hooks: Optional[Sequence[AttentionHook]] = None):
        self.hooks: List[AttentionHook] = list(hooks or [])
        self.phase = 'probe'
        self.step = 0
        self.timestep = 0
        self.latent_grid: Tuple[int, int] = (0, 0)

    def add(self, hook: AttentionHook) -> 'HookRegistry':
        self.hooks.append(hook)
        return self

    def validate(self, known_blocks: Sequence[str]) -> None:
        known = set(known_blocks)
        for hook in self.hooks:
            if hook.blocks is None:
                continue
            unknown = sorted(hook.blocks - known)
            if unknown:
                raise HookConfigurationError(
                    f"{type(hook).__name__} references unknown attention blocks: {unknown}"
                )

    def set_position(self, phase: str, step: int, timestep: int) -> None:
        self.phase, self.step, self.timestep = phase, step, int(timestep)

    def dispatch(self, ctx: AttentionContext) -> torch.Tensor:
        for hook in self.hooks:
            if hook.wants(ctx.block, ctx.phase, ctx.step):
                replaced = hook(ctx)
                if replaced is not None:
                    ctx.output = replaced
        return ctx.output


@contextlib.contextmanager
def activate(registry: Optional[HookRegistry]) -> Iterator[Optional[HookRegistry]]:
    token = _ACTIVE_REGISTRY.set(registry)
    try:
        yield registry
    finally:
        _ACTIVE_REGISTRY.reset(token)


def active_registry() -> Optional[HookRegistry]:
    return _ACTIVE_REGISTRY.get()


def token_grid(tokens: int, latent_grid: Tuple[int, int]) -> Tuple[int, int]:
    """Recover (h, w) of a token sequence from the latent's aspect ratio."""
    lh, lw = latent_grid
    if lh <= 0 or lw <= 0:
        side = int(round(tokens ** 0.5))
        return side, tokens // max(side, 1)
    factor = (lh * lw / tokens) ** 0.5
    h = max(int(round(lh / factor)), 1)
    return h, tokens // h


def heads_to_grid(x: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """(heads, tokens, d) -> (heads*d, h, w) with channel index head*d + j."""
    heads, tokens, d = x.shape
    return x.permute(0, 2, 1).reshape(heads * d, grid[0], grid[1])


def grid_to_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """Inverse of heads_to_grid."""
    channels, h, w = x.shape
    return x.reshape(heads, channels // heads, h * w).permute(0, 2, 1)


class HookedAttnProcessor:
    """
    Classic (non-fused) attention processor with a hook dispatch point.
    Mirrors diffusers' ``AttnProcessor`` so an empty registry reproduces it.
    """

    def __init__(self, block: str):
        self.block = block

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, temb=None, *args, **kwargs):
        residual = hidden_states

        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)

        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch_size, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch_size, channel, height * width).transpose(1, 2)

        batch_size, sequence_length, _ = (
            hidden_states.shape if encoder_hidden_states is None else encoder_hidden_states.shape
        )
        attention_mask = attn.prepare_attention_mask(attention_mask, sequence_length, batch_size)

        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        query = attn.to_q(hidden_states)
        if encoder_hidden_states is None:
            encoder_hidden_states = hidden_states
        elif attn.norm_cross:
            encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)

        key = attn.to_k(encoder_hidden_states)
        value = attn.to_v(encoder_hidden_states)

        query = attn.head_to_batch_dim(query)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)

        attention_probs = attn.get_attention_scores(query, key, attention_mask)
        out = torch.bmm(attention_probs, value)

        registry = active_registry()
        if registry is not None and registry.hooks:
            # batch size is 1 throughout; hooks work on (heads, tokens, d)
            ctx = AttentionContext(
                block=self.block,
                phase=registry.phase,
                step=registry.step,
                timestep=registry.timestep,
                query=query,
                key=key,
                value=value,
                output=out,
                heads=attn.heads,
                grid=token_grid(query.shape[1], registry.latent_grid),
                scale=attn.scale,
            )
            out = registry.dispatch(ctx)

        hidden_states = attn.batch_to_head_dim(out)
        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)

        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(batch_size, channel, height, width)
        if attn.residual_connection:
            hidden_states = hidden_states + residual

        hidden_states = hidden_states / attn.rescale_output_factor
        return hidden_states


def is_decoder_self_attention(processor_name: str) -> bool:
    return processor_name.startswith('up_blocks') and processor_name.endswith('attn1.processor')


def install_processors(unet) -> List[str]:
    """
    Swap in ``HookedAttnProcessor`` for every decoder self-attention module.

    Returns:
        Block names (processor key without the ``.processor`` suffix), in
        U-Net order
    """
    processors: Dict[str, object] = dict(unet.attn_processors)
    blocks = []
    for name in processors:
        if is_decoder_self_attention(name):
            block = name[:-len('.processor')]
            processors[name] = HookedAttnProcessor(block)
            blocks.append(block)
    unet.set_attn_processor(processors)
    logger.info(f"Installed hook processors on {len(blocks)} decoder self-attention blocks")
    return blocks


class AttentionRecorder(AttentionHook):
    """
    Pure observer that stores what it sees, keyed by (block, timestep).

    Args:
        fields: any of 'query', 'key', 'value', 'output'
        device: where recorded tensors are parked
    """

    def __init__(self, fields: Sequence[str] = ('key', 'value', 'output'),
                 device: Optional[str] = None, **kwargs):
        super().__init__(**kwargs)
        self.fields = tuple(fields)
        self.device = device
        self.records: Dict[Tuple[str, int], Dict[str, torch.Tensor]] = {}
        self.grids: Dict[str, Tuple[int, int]] = {}
        self.heads: Dict[str, int] = {}
        self.calls = 0

    def __call__(self, ctx: AttentionContext) -> None:
        self.calls += 1
        entry = {}
        for name in self.fields:
            tensor = getattr(ctx, name).detach()
            entry[name] = tensor.to(self.device) if self.device else tensor.clone()
        self.records[(ctx.block, ctx.timestep)] = entry
        self.grids[ctx.block] = ctx.grid
        self.heads[ctx.block] = ctx.heads
        return None

    def get(self, block: str, timestep: int, name: str) -> Optional[torch.Tensor]:
        entry = self.records.get((block, int(timestep)))
        return None if entry is None else entry.get(name)
