"""
Backbone Component
==================
Pretrained latent-diffusion checkpoint behind a small interface:

- encode / decode between pixels and latents
- deterministic DDIM inversion and sampling with attention hooks
- intermediate decoder features at a (timestep, layer) locator
- Q/K/V capture of every decoder self-attention block

Main entry point: load_backbone()
"""

import logging
import threading
from typing import Dict

from .diffusion import StableDiffusionBackbone
from .hooks import (
    AttentionContext,
    AttentionHook,
    AttentionRecorder,
    HookRegistry,
    grid_to_heads,
    heads_to_grid,
)
from .types import (
    AttentionBundle,
    AttentionRecord,
    DiffusionSchedule,
    FeatureLocator,
    FeatureMap,
    LatentTensor,
)

logger = logging.getLogger(__name__)

_LOADED: Dict[str, StableDiffusionBackbone] = {}
_LOCK = threading.Lock()


def load_backbone(config: Dict) -> StableDiffusionBackbone:
    """
    Load (or reuse) the backbone named by the config.

    Backbones are cached per (checkpoint, device, dtype, steps, seed, layers)
    so evaluation workers share one immutable set of weights.
    """
    options = config['backbone']
    key = '|'.join(str(options.get(k)) for k in
                   ('checkpoint', 'device', 'dtype', 'num_steps', 'seed', 'layers'))
    with _LOCK:
        if key not in _LOADED:
            _LOADED[key] = StableDiffusionBackbone.from_config(config)
        return _LOADED[key]


def format_layer_fixture(shapes: Dict) -> str:
    """``name = channels height width`` lines, one per layer, sorted by name."""
    return ''.join(f"{name} = {c} {h} {w}\n" for name, (c, h, w) in sorted(shapes.items()))


def parse_layer_fixture(text: str) -> Dict:
    shapes = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        name, values = line.split('=', 1)
        c, h, w = (int(v) for v in values.split())
        shapes[name.strip()] = (c, h, w)
    return shapes


__all__ = [
    'StableDiffusionBackbone',
    'load_backbone',
    'format_layer_fixture',
    'parse_layer_fixture',
    'AttentionContext',
    'AttentionHook',
    'AttentionRecorder',
    'HookRegistry',
    'heads_to_grid',
    'grid_to_heads',
    'AttentionBundle',
    'AttentionRecord',
    'DiffusionSchedule',
    'FeatureLocator',
    'FeatureMap',
    'LatentTensor',
]
