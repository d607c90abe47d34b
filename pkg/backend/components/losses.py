"""
Structural and style losses for the fitting cycle's stopping rule.

content_loss: mean |Sobel(I_gen) - Sobel(I_c)| on BT.601 luminance.
style_loss:   sum over VGG layers of ||G(gen) - G(style)||_F^2 with Gram
              matrices normalised by k*h*w.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import torch
import torch.nn.functional as F

from components.errors import DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

BT601 = (0.299, 0.587, 0.114)

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0],
                        [-2.0, 0.0, 2.0],
                        [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.contiguous()


@dataclass
class EdgeMap:
    data: torch.Tensor      # (h, w), >= 0

    def __post_init__(self):
        if self.data.dim() != 2:
            raise DimensionMismatchError(f"Edge map must be (h, w), got {tuple(self.data.shape)}")


@dataclass
class GramMatrix:
    data: torch.Tensor      # (k, k)
    normalization: float

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])


def luminance(image: torch.Tensor) -> torch.Tensor:
    """(3, H, W) RGB -> (H, W); a 2-D input is returned as is."""
    if image.dim() == 2:
        return image
    if image.dim() != 3 or image.shape[0] != 3:
        raise DimensionMismatchError(f"Expected (3, H, W) or (H, W), got {tuple(image.shape)}")
    weights = torch.tensor(BT601, dtype=image.dtype, device=image.device).view(3, 1, 1)
    return (image * weights).sum(dim=0)


def sobel_edges(image: torch.Tensor) -> EdgeMap:
    """Gradient magnitude sqrt(Gx^2 + Gy^2) with reflect-padded borders."""
    gray = luminance(image)
    h, w = gray.shape
    if h < 3 or w < 3:
        raise DimensionMismatchError(f"Sobel needs at least 3x3 pixels, got {h}x{w}")

    x = F.pad(gray[None, None], (1, 1, 1, 1), mode='reflect')
    kernels = torch.stack([SOBEL_X, SOBEL_Y]).unsqueeze(1).to(dtype=gray.dtype, device=gray.device)
    grads = F.conv2d(x, kernels)[0]
    return EdgeMap(torch.sqrt(grads[0] ** 2 + grads[1] ** 2))


def content_loss(generated: torch.Tensor, content: torch.Tensor) -> float:
    if tuple(generated.shape[-2:]) != tuple(content.shape[-2:]):
        raise DimensionMismatchError(
            f"content_loss needs equal resolutions, got {tuple(generated.shape[-2:])} "
            f"and {tuple(content.shape[-2:])}"
        )
    edges_gen = sobel_edges(generated).data
    edges_content = sobel_edges(content.to(generated.dtype)).data
    return float((edges_gen - edges_content).abs().mean())


def gram_matrix(features: torch.Tensor, normalize: bool = True) -> GramMatrix:
    """G = F F^T, divided by k*h*w when normalising; F is (k, h*w)."""
    if features.dim() == 4:
        if features.shape[0] != 1:
            raise DimensionMismatchError("gram_matrix takes a single feature map")
        features = features[0]
    if features.dim() != 3 or min(features.shape) < 1:
        raise DimensionMismatchError(f"Features must be non-empty (k, h, w), got {tuple(features.shape)}")
    k, h, w = features.shape
    flat = features.reshape(k, h * w)
    divisor = float(k * h * w) if normalize else 1.0
    return GramMatrix(flat @ flat.T / divisor, divisor)


def style_loss(generated: Dict[str, torch.Tensor], style: Dict[str, torch.Tensor],
               normalize: bool = True) -> float:
    """Sum over layers of the squared Frobenius distance between Gram matrices."""
    if set(generated) != set(style):
        raise DimensionMismatchError(
            f"Layer sets differ: {sorted(generated)} vs {sorted(style)}"
        )
    total = 0.0
    for layer in sorted(generated):
        g_gen = gram_matrix(generated[layer], normalize).data
        g_style = gram_matrix(style[layer], normalize).data.to(g_gen.dtype)
        if g_gen.shape != g_style.shape:
            raise DimensionMismatchError(f"{layer}: channel counts differ")
        total += float(((g_gen - g_style) ** 2).sum())
    return total


class LossEvaluator:
    """
    Both losses against one style image. The style features are computed once
    in ``set_style`` and reused across iterations; ``for_style`` returns a
    bound copy so one evaluator can serve concurrent pairs.
    """

    def __init__(self, extractor, style_layers: Sequence[str], normalize: bool = True,
                 use_sobel: bool = True, use_gram: bool = True):
        if not style_layers and use_gram:
            raise ValidationError("losses.style_layers must be non-empty when the Gram loss is on")
        self.extractor = extractor
        self.style_layers = list(style_layers)
        self.normalize = normalize
        self.use_sobel = use_sobel
        self.use_gram = use_gram
        self._style_features: Optional[Dict[str, torch.Tensor]] = None

    @classmethod
    def from_config(cls, config: Dict, extractor) -> 'LossEvaluator':
        options = config['losses']
        return cls(extractor, options['style_layers'], options.get('gram_normalize', True),
                   options.get('use_sobel', True), options.get('use_gram', True))

    def _features(self, image: torch.Tensor) -> Dict[str, torch.Tensor]:
        feats = self.extractor(image, self.style_layers)
        return {name: f[0] for name, f in feats.items()}

    def set_style(self, style: torch.Tensor) -> None:
        self._style_features = self._features(style) if self.use_gram else None

    def for_style(self, style: torch.Tensor) -> 'LossEvaluator':
        bound = copy.copy(self)
        bound.set_style(style)
        return bound

    def content(self, generated: torch.Tensor, content: torch.Tensor) -> Optional[float]:
        return content_loss(generated, content) if self.use_sobel else None

    def style(self, generated: torch.Tensor) -> Optional[float]:
        if not self.use_gram:
            return None
        if self._style_features is None:
            raise ValidationError("set_style must be called before evaluating the style loss")
        return style_loss(self._features(generated), self._style_features, self.normalize)
