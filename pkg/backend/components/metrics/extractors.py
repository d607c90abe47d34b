"""
Pretrained feature extractors behind one calling convention: a batch of
(N, 3, H, W) images in [0, 1] goes in, named or listed feature tensors come out.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from components.errors import AssetError, ConfigError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def as_batch(images: torch.Tensor) -> torch.Tensor:
    return images.unsqueeze(0) if images.dim() == 3 else images


def resize(images: torch.Tensor, size: Optional[int]) -> torch.Tensor:
    """Bilinear resize to a square ``size``; None keeps the input."""
    if size is None or tuple(images.shape[-2:]) == (size, size):
        return images
    return F.interpolate(images, size=(size, size), mode='bilinear', align_corners=False)


class VGGFeatureExtractor(nn.Module):
    """
    VGG-style ``features`` stack with Gatys layer names
    (conv1_1, relu1_1, ..., relu5_4). Inputs are ImageNet-normalised.
    """

    def __init__(self, features: nn.Sequential, normalize: bool = True):
        super().__init__()
        self.features = features.eval()
        self.features.requires_grad_(False)
        self.normalize = normalize
        self.register_buffer('mean', torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

        self.layer_names: List[str] = []
        block, index = 1, 1
        for module in self.features:
            if isinstance(module, nn.Conv2d):
                self.layer_names.append(f"conv{block}_{index}")
            elif isinstance(module, nn.ReLU):
                module.inplace = False
                self.layer_names.append(f"relu{block}_{index}")
                index += 1
            elif isinstance(module, (nn.MaxPool2d, nn.AvgPool2d)):
                self.layer_names.append(f"pool{block}")
                block, index = block + 1, 1
            else:
                self.layer_names.append(f"{type(module).__name__.lower()}{block}_{index}")

    @classmethod
    def vgg19(cls, weights_path: Optional[str] = None) -> 'VGGFeatureExtractor':
        from torchvision.models import vgg19

        model = vgg19(weights=None)
        if weights_path:
            try:
                model.load_state_dict(torch.load(weights_path, map_location='cpu'))
            except Exception as e:
                raise AssetError(f"Could not load VGG19 weights from {weights_path}: {e}") from e
        else:
            logger.warning("VGG19 built without pretrained weights")
        return cls(model.features)

    def check_layers(self, layers: Sequence[str]) -> None:
        unknown = [l for l in layers if l not in self.layer_names]
        if unknown:
            raise ConfigError(f"Unknown VGG layers {unknown}; available: {self.layer_names}")

    @torch.no_grad()
    def forward(self, images: torch.Tensor, layers: Sequence[str]) -> Dict[str, torch.Tensor]:
        self.check_layers(layers)
        x = as_batch(images).to(self.mean.device, self.mean.dtype)
        if self.normalize:
            x = (x - self.mean) / self.std
        wanted = set(layers)
        last = max(self.layer_names.index(l) for l in layers)
        out = {}
        for i, module in enumerate(self.features):
            x = module(x)
            name = self.layer_names[i]
            if name in wanted:
                out[name] = x
            if i == last:
                break
        return out


@dataclass
class PerceptualExtractor:
    """
    Weighted-layer perceptual network for LPIPS.

    Args:
        identifier: name recorded in reports (e.g. 'lpips-alex')
        feature_fn: (N, 3, H, W) in [0, 1] -> list of (N, C_l, H_l, W_l)
        weights: one non-negative (C_l,) vector per layer
    """
    identifier: str
    feature_fn: Callable[[torch.Tensor], List[torch.Tensor]]
    weights: List[torch.Tensor]

    def __post_init__(self):
        if not self.weights:
            raise ConfigError(f"{self.identifier}: layer list is empty")
        for i, w in enumerate(self.weights):
            if (w < 0).any():
                raise ConfigError(f"{self.identifier}: layer {i} has negative weights")

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> List[torch.Tensor]:
        feats = list(self.feature_fn(as_batch(images)))
        if len(feats) != len(self.weights):
            raise ConfigError(
                f"{self.identifier}: {len(feats)} feature layers but {len(self.weights)} weight vectors"
            )
        return feats

    @classmethod
    def from_lpips(cls, net: str = 'alex', device: str = 'cpu') -> 'PerceptualExtractor':
        """Backbone and learned linear heads of the published LPIPS model."""
        import lpips as lpips_lib

        try:
            model = lpips_lib.LPIPS(net=net, verbose=False).to(device).eval()
        except Exception as e:
            raise AssetError(f"Could not load LPIPS ({net}): {e}") from e

        def feature_fn(images: torch.Tensor) -> List[torch.Tensor]:
            x = images.to(device) * 2 - 1
            return list(model.net.forward(model.scaling_layer(x)))

        weights = [lin.model[-1].weight.detach().flatten().to(device) for lin in model.lins]
        return cls(identifier=f"lpips-{net}", feature_fn=feature_fn, weights=weights)


class InceptionFeatures:
    """2048-d pool features of the FID Inception network (pytorch-fid port)."""

    def __init__(self, device: str = 'cpu', model: Optional[nn.Module] = None, dims: int = 2048):
        if model is None:
            from pytorch_fid.inception import InceptionV3
            try:
                model = InceptionV3([InceptionV3.BLOCK_INDEX_BY_DIM[dims]])
            except Exception as e:
                raise AssetError(f"Could not load FID Inception weights: {e}") from e
        self.model = model.to(device).eval()
        self.device = device
        self.dims = dims

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        pred = self.model(as_batch(images).to(self.device))
        if isinstance(pred, (list, tuple)):
            pred = pred[0]
        if pred.dim() == 4 and pred.shape[2:] != (1, 1):
            pred = F.adaptive_avg_pool2d(pred, (1, 1))
        return pred.reshape(pred.shape[0], -1).cpu().numpy().astype(np.float64)
