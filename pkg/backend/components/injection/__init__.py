"""
Injection Component
===================
KV-swap stylization and correspondence-weighted attention injection.

KVSwapHook runs on every sampling step of the target blocks;
CorrespondenceInjectionHook adds the matched style attention output once
the sampling step reaches ``injection.start_step``.

Main entry point: build_injection_hooks()
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

from components.backbone.hooks import AttentionHook
from components.correspondence.matcher import CorrespondenceMap
from .attention import (
    DEFAULT_INJECTION_BLOCKS,
    InjectionConfig,
    attention_weights,
    inject_correspondence,
    injection_active,
    kv_swap_attention,
)
from .hooks import (
    CorrespondenceInjectionHook,
    KVSwapHook,
    StyleBank,
    sampling_to_inversion_step,
)

logger = logging.getLogger(__name__)


def select_target_blocks(
    attention_shapes: Dict[str, Tuple[int, int, int]],
    feature_grid: Optional[Tuple[int, int]] = None,
    configured: Optional[Sequence[str]] = None
) -> Tuple[str, ...]:
    """
    Blocks receiving KV swap and injection.

    Explicit ``injection.blocks`` win. Otherwise the decoder self-attention
    blocks whose token grid equals the correspondence grid; if none match,
    the default fine-grid set, and failing that every decoder block.
    """
    if configured:
        return tuple(configured)
    if feature_grid is not None:
        matching = tuple(b for b, (_, h, w) in attention_shapes.items() if (h, w) == tuple(feature_grid))
        if matching:
            return matching
    defaults = tuple(b for b in DEFAULT_INJECTION_BLOCKS if b in attention_shapes)
    if defaults:
        return defaults
    logger.info("No default injection blocks in this checkpoint; using every decoder block")
    return tuple(attention_shapes)


def build_injection_hooks(
    bank: StyleBank,
    mapping: Optional[CorrespondenceMap],
    config: InjectionConfig
) -> List[AttentionHook]:
    """Ordered hook list for one Stage B sampling pass: KV swap, then injection."""
    hooks: List[AttentionHook] = [KVSwapHook(bank, config.gamma, config.target_blocks)]
    if mapping is not None and config.w > 0:
        hooks.append(CorrespondenceInjectionHook(bank, mapping, config))
    return hooks


__all__ = [
    'DEFAULT_INJECTION_BLOCKS',
    'InjectionConfig',
    'attention_weights',
    'kv_swap_attention',
    'inject_correspondence',
    'injection_active',
    'StyleBank',
    'KVSwapHook',
    'CorrespondenceInjectionHook',
    'sampling_to_inversion_step',
    'select_target_blocks',
    'build_injection_hooks',
]
