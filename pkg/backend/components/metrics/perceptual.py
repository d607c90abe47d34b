"""
LPIPS and CFSD.
"""

import logging
from typing import Optional

import torch
import torch.nn.functional as F

from components.errors import DimensionMismatchError
from .extractors import PerceptualExtractor, VGGFeatureExtractor, as_batch, resize

logger = logging.getLogger(__name__)

EPS = 1e-10


def _same_resolution(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape[-2:]) != tuple(b.shape[-2:]):
        raise DimensionMismatchError(
            f"{what} needs equal resolutions, got {tuple(a.shape[-2:])} and {tuple(b.shape[-2:])}"
        )


def unit_normalize(features: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt(torch.sum(features ** 2, dim=1, keepdim=True))
    return features / (norm + EPS)


@torch.no_grad()
def lpips(x: torch.Tensor, x0: torch.Tensor, extractor: PerceptualExtractor) -> float:
    """
    sum_l mean_{h,w} sum_c w_lc * (phi_l(x) - phi_l(x0))^2 over unit-normalised
    channel vectors. Images are (3, H, W) or (1, 3, H, W) in [0, 1].
    """
    _same_resolution(x, x0, 'LPIPS')
    total = 0.0
    for fx, f0, weight in zip(extractor.features(x), extractor.features(x0), extractor.weights):
        diff = (unit_normalize(fx) - unit_normalize(f0)) ** 2
        weighted = (diff * weight.to(diff.device, diff.dtype).view(1, -1, 1, 1)).sum(dim=1)
        total += float(weighted.mean())
    return total


def cfsd_from_features(content: torch.Tensor, stylized: torch.Tensor) -> float:
    """
    Mean over spatial rows of KL(S_c || S_cs), where S = row-softmax of the
    (hw, hw) self-correlation F^T F of a (C, h, w) feature map.
    """
    if content.shape != stylized.shape:
        raise DimensionMismatchError(
            f"CFSD features differ in shape: {tuple(content.shape)} vs {tuple(stylized.shape)}"
        )
    fc = content.reshape(content.shape[0], -1).double()
    fs = stylized.reshape(stylized.shape[0], -1).double()
    log_sc = F.log_softmax(fc.T @ fc, dim=1)
    log_ss = F.log_softmax(fs.T @ fs, dim=1)
    kl = (log_sc.exp() * (log_sc - log_ss)).sum(dim=1)
    return max(float(kl.mean()), 0.0)


def correlation_rows(features: torch.Tensor) -> torch.Tensor:
    """Row-softmax S of the self-correlation matrix; every row sums to 1."""
    f = features.reshape(features.shape[0], -1).double()
    return F.softmax(f.T @ f, dim=1)


@torch.no_grad()
def cfsd(content: torch.Tensor, stylized: torch.Tensor, extractor: VGGFeatureExtractor,
         layer: str = 'relu3_4', size: Optional[int] = 256) -> float:
    """Content feature structural distance between a content image and its stylization."""
    _same_resolution(content, stylized, 'CFSD')
    batch = torch.cat([as_batch(content), as_batch(stylized)]).float()
    feats = extractor(resize(batch, size), [layer])[layer]
    return cfsd_from_features(feats[0], feats[1])
