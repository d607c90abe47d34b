"""
Metrics Component
=================
LPIPS, FID, ArtFID and CFSD for style-transfer evaluation.

- LPIPS between stylized and content images (content preservation)
- FID between stylized and style image sets (style fidelity)
- ArtFID = (1 + LPIPS) * (1 + FID)
- CFSD between content and stylized self-correlation structure

Main entry points: MetricSuite.from_config(), artfid()
"""

import json
import logging
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from components.errors import ValidationError
from .assets import AssetSpec, ensure_asset, load_asset_manifest, prepare_assets
from .extractors import InceptionFeatures, PerceptualExtractor, VGGFeatureExtractor, as_batch, resize
from .frechet import DistributionStats, fid, frechet_distance, trace_sqrt_product
from .perceptual import cfsd, cfsd_from_features, correlation_rows, lpips

logger = logging.getLogger(__name__)

REPORT_FIELDS = (
    'fid', 'lpips', 'artfid', 'cfsd',
    'pairs', 'excluded', 'config_hash', 'extractors',
    'datasets', 'exclusions', 'config', 'per_pair',
)


def artfid(lpips_value: float, fid_value: float) -> float:
    if lpips_value < 0 or fid_value < 0:
        raise ValidationError(f"ArtFID inputs must be >= 0, got lpips={lpips_value}, fid={fid_value}")
    return (1 + lpips_value) * (1 + fid_value)


@dataclass
class MetricReport:
    fid: float
    lpips: float
    cfsd: float
    artfid: float = field(default=float('nan'))
    pairs: int = 0
    excluded: int = 0
    config_hash: str = ''
    extractors: Dict[str, str] = field(default_factory=dict)
    datasets: Dict = field(default_factory=dict)
    exclusions: List[Dict] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    per_pair: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ('fid', 'lpips', 'cfsd'):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        # artfid always derives from the stored fid and lpips
        self.artfid = artfid(self.lpips, self.fid)

    def to_dict(self) -> Dict:
        return OrderedDict((name, getattr(self, name)) for name in REPORT_FIELDS)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=str) + '\n'

    def save(self, path: str) -> None:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix='.tmp')
        with os.fdopen(fd, 'w') as f:
            f.write(self.to_json())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> 'MetricReport':
        with open(path) as f:
            data = json.load(f)
        data.pop('artfid', None)
        return cls(**data)

    def summary(self) -> str:
        return (f"FID {self.fid:.3f} | LPIPS {self.lpips:.3f} | "
                f"ArtFID {self.artfid:.3f} | CFSD {self.cfsd:.3f} "
                f"({self.pairs} pairs, {self.excluded} excluded)")


class MetricSuite:
    """
    The three extractors a report needs, loaded on first use.

    Any of them can be injected (tests use small random networks).
    """

    def __init__(
        self,
        perceptual: Optional[PerceptualExtractor] = None,
        vgg: Optional[VGGFeatureExtractor] = None,
        inception=None,
        cfsd_layer: str = 'relu3_4',
        cfsd_size: Optional[int] = 256,
        lpips_net: str = 'alex',
        device: str = 'cpu',
        asset_manifest: Optional[str] = None,
        batch_size: int = 8,
        fid_size: Optional[int] = 299,
    ):
        self._perceptual = perceptual
        self._vgg = vgg
        self._inception = inception
        self.cfsd_layer = cfsd_layer
        self.cfsd_size = cfsd_size
        self.lpips_net = lpips_net
        self.device = device
        self.asset_manifest = asset_manifest
        self.batch_size = batch_size
        self.fid_size = fid_size

    @classmethod
    def from_config(cls, config: Dict) -> 'MetricSuite':
        options = config['metrics']
        device = options.get('device', 'cuda')
        if device.startswith('cuda') and not torch.cuda.is_available():
            device = 'cpu'
        return cls(
            cfsd_layer=options['cfsd_layer'],
            cfsd_size=options.get('cfsd_size', 256),
            lpips_net=options.get('lpips_net', 'alex'),
            device=device,
            asset_manifest=options.get('assets'),
        )

    @property
    def perceptual(self) -> PerceptualExtractor:
        if self._perceptual is None:
            prepare_assets(self.asset_manifest, ['alexnet'] if self.lpips_net == 'alex' else [])
            self._perceptual = PerceptualExtractor.from_lpips(self.lpips_net, self.device)
        return self._perceptual

    @property
    def vgg(self) -> VGGFeatureExtractor:
        if self._vgg is None:
            paths = prepare_assets(self.asset_manifest, ['vgg19'])
            self._vgg = VGGFeatureExtractor.vgg19(paths['vgg19']).to(self.device)
        return self._vgg

    @property
    def inception(self):
        if self._inception is None:
            prepare_assets(self.asset_manifest, ['inception'])
            self._inception = InceptionFeatures(self.device)
        return self._inception

    def identifiers(self) -> Dict[str, str]:
        return {
            'lpips': self._perceptual.identifier if self._perceptual else f"lpips-{self.lpips_net}",
            'cfsd': f"vgg19/{self.cfsd_layer}@{self.cfsd_size}",
            'fid': 'inception-v3/pool3',
        }

    def lpips(self, x: torch.Tensor, x0: torch.Tensor) -> float:
        return lpips(x, x0, self.perceptual)

    def cfsd(self, content: torch.Tensor, stylized: torch.Tensor) -> float:
        return cfsd(content, stylized, self.vgg, self.cfsd_layer, self.cfsd_size)

    def fid_features(self, images: Sequence[torch.Tensor]) -> np.ndarray:
        """Inception features for a list of (3, H, W) images, batched."""
        chunks = []
        for start in range(0, len(images), self.batch_size):
            batch = torch.cat([resize(as_batch(img.float()), self.fid_size)
                               for img in images[start:start + self.batch_size]])
            chunks.append(self.inception(batch))
        return np.concatenate(chunks, axis=0)

    def fid(self, real: Sequence[torch.Tensor], generated: Sequence[torch.Tensor]) -> float:
        return fid(self.fid_features(real), self.fid_features(generated))


__all__ = [
    'artfid',
    'lpips',
    'cfsd',
    'cfsd_from_features',
    'correlation_rows',
    'fid',
    'frechet_distance',
    'trace_sqrt_product',
    'DistributionStats',
    'MetricReport',
    'MetricSuite',
    'PerceptualExtractor',
    'VGGFeatureExtractor',
    'InceptionFeatures',
    'AssetSpec',
    'load_asset_manifest',
    'ensure_asset',
    'prepare_assets',
]
