"""
Correspondence Component
========================
Dense semantic correspondence between diffusion feature maps.

- cosine dense matching (exact argmax, first maximum wins)
- PCK against keypoint annotations
- (t*, l*) grid search, cached per checkpoint

Main entry points: dense_match(), run_grid_search(), resolve_locator()
"""

import functools
import logging
from typing import Dict, Optional, Sequence

from components.backbone.types import FeatureLocator
from components.dataset import load_image, square_size
from components.errors import GridSearchError
from .grid_search import (
    FeatureSource,
    GridSearchResult,
    grid_search,
    load_locator_cache,
    save_locator_cache,
    select_best,
)
from .matcher import CorrespondenceMap, cosine_similarity, dense_match
from .pck import (
    BenchmarkPair,
    KeypointPair,
    grid_to_image,
    image_to_grid,
    load_keypoint_manifest,
    load_spair,
    pck_score,
    predict_keypoints,
    write_keypoint_manifest,
)

logger = logging.getLogger(__name__)


def backbone_feature_source(backbone, resolution: int) -> FeatureSource:
    """FeatureSource reading images from disk at the backbone resolution."""

    @functools.lru_cache(maxsize=64)
    def image(path: str):
        return load_image(path, square_size(resolution))

    def extract(path: str, locator: FeatureLocator):
        return backbone.extract_features(image(path), locator, source=path)

    return extract


def run_grid_search(
    pairs: Sequence[BenchmarkPair],
    config: Dict,
    backbone
) -> GridSearchResult:
    """Grid search over the configured candidate sets, persisted to the locator cache."""
    options = config['backbone']
    result = grid_search(
        pairs,
        timesteps=options['timesteps'],
        layers=options['layers'],
        alpha=config['correspondence']['alpha'],
        extract=backbone_feature_source(backbone, options['resolution']),
        workers=config['correspondence'].get('workers', 1),
        checkpoint_id=options['checkpoint'],
    )
    save_locator_cache(result, config['correspondence']['locator_cache'])
    return result


def resolve_locator(config: Dict, checkpoint_id: Optional[str] = None) -> FeatureLocator:
    """
    (t*, l*) for a transfer: explicit ``correspondence.locator`` first, then
    the locator cache. Raises GridSearchError when neither is available.
    """
    explicit = config['correspondence'].get('locator')
    if explicit:
        return FeatureLocator(int(explicit['timestep']), explicit['layer'])

    path = config['correspondence']['locator_cache']
    cached = load_locator_cache(path, checkpoint_id or config['backbone']['checkpoint'])
    if cached is None:
        raise GridSearchError(
            f"No cached locator at {path}; run the gridsearch subcommand or set correspondence.locator"
        )
    logger.info(f"Using cached locator t*={cached.best.timestep} l*={cached.best.layer}")
    return cached.best


__all__ = [
    'CorrespondenceMap',
    'cosine_similarity',
    'dense_match',
    'KeypointPair',
    'BenchmarkPair',
    'image_to_grid',
    'grid_to_image',
    'predict_keypoints',
    'pck_score',
    'load_keypoint_manifest',
    'write_keypoint_manifest',
    'load_spair',
    'GridSearchResult',
    'grid_search',
    'select_best',
    'save_locator_cache',
    'load_locator_cache',
    'backbone_feature_source',
    'run_grid_search',
    'resolve_locator',
]
