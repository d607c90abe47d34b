"""
Frechet distance between two Gaussian feature distributions.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import linalg

from components.errors import DimensionMismatchError, FIDError, ValidationError

logger = logging.getLogger(__name__)

EPS = 1e-6
# relative size a negative eigenvalue may reach before the product counts as non-PSD
NEGATIVE_TOLERANCE = 1e-6


@dataclass
class DistributionStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValidationError(f"Need at least 2 samples, got {self.count}")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise DimensionMismatchError("Covariance does not match the mean's dimension")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValidationError("Covariance must be symmetric")

    @classmethod
    def from_features(cls, features: np.ndarray) -> 'DistributionStats':
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionMismatchError(f"Features must be (n, d), got shape {features.shape}")
        if features.shape[0] < 2:
            raise ValidationError(f"Need at least 2 samples, got {features.shape[0]}")
        cov = np.cov(features, rowvar=False)
        cov = np.atleast_2d(cov)
        return cls(mean=features.mean(axis=0), cov=(cov + cov.T) / 2, count=features.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    values = np.clip(values, 0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def trace_sqrt_product(cov1: np.ndarray, cov2: np.ndarray) -> float:
    """
    Tr((cov1 cov2)^(1/2)) through the symmetric form
    sqrt(cov1) cov2 sqrt(cov1), which has the same eigenvalues.
    """
    root = _psd_sqrt(cov1)
    product = root @ cov2 @ root
    values = linalg.eigh((product + product.T) / 2, eigvals_only=True)
    if not np.all(np.isfinite(values)):
        raise np.linalg.LinAlgError("non-finite eigenvalues")
    scale = max(1.0, float(np.abs(values).max()))
    if values.min() < -NEGATIVE_TOLERANCE * scale:
        raise np.linalg.LinAlgError(f"product is not PSD (min eigenvalue {values.min():.3e})")
    return float(np.sqrt(np.clip(values, 0, None)).sum())


def frechet_distance(real: DistributionStats, gen: DistributionStats) -> float:
    if real.mean.shape != gen.mean.shape:
        raise DimensionMismatchError(
            f"Feature dimensions differ: {real.mean.shape[0]} vs {gen.mean.shape[0]}"
        )
    diff = real.mean - gen.mean
    try:
        covmean = trace_sqrt_product(real.cov, gen.cov)
    except (np.linalg.LinAlgError, ValueError) as e:
        logger.warning(f"FID matrix square root failed ({e}); retrying with {EPS} on the diagonal")
        offset = np.eye(real.cov.shape[0]) * EPS
        try:
            covmean = trace_sqrt_product(real.cov + offset, gen.cov + offset)
        except (np.linalg.LinAlgError, ValueError) as e2:
            raise FIDError(f"Covariance product has no stable square root: {e2}") from e2

    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2 * covmean)
    return max(value, 0.0)


def fid(real: Union[np.ndarray, DistributionStats], gen: Union[np.ndarray, DistributionStats]) -> float:
    """FID between two feature sets (n, d) or precomputed statistics."""
    if not isinstance(real, DistributionStats):
        real = DistributionStats.from_features(real)
    if not isinstance(gen, DistributionStats):
        gen = DistributionStats.from_features(gen)
    return frechet_distance(real, gen)
