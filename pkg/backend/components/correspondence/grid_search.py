"""
(timestep, layer) grid search scored by mean PCK, plus the locator cache.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from components.backbone.types import FeatureLocator, FeatureMap
from components.errors import GridSearchError, ValidationError
from .matcher import dense_match
from .pck import BenchmarkPair, pck_score, predict_keypoints

logger = logging.getLogger(__name__)

# extract(image_path, locator) -> FeatureMap
FeatureSource = Callable[[str, FeatureLocator], FeatureMap]


@dataclass
class GridSearchResult:
    scores: Dict[FeatureLocator, Optional[float]]   # None marks a failed cell
    best: FeatureLocator
    alpha: float = 0.1
    checkpoint_id: str = ''
    pair_count: int = 0
    failures: Dict[str, str] = field(default_factory=dict)

    @property
    def best_score(self) -> float:
        return float(self.scores[self.best])

    def table(self) -> List[Dict]:
        return [
            {'timestep': loc.timestep, 'layer': loc.layer, 'score': score}
            for loc, score in sorted(self.scores.items())
        ]

    def to_dict(self) -> Dict:
        return {
            'checkpoint': self.checkpoint_id,
            'best': self.best.to_dict(),
            'best_score': self.best_score,
            'alpha': self.alpha,
            'pairs': self.pair_count,
            'scores': self.table(),
            'failures': dict(sorted(self.failures.items())),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'GridSearchResult':
        scores = {
            FeatureLocator(int(row['timestep']), row['layer']): row['score']
            for row in data['scores']
        }
        best = FeatureLocator(int(data['best']['timestep']), data['best']['layer'])
        return cls(scores=scores, best=best, alpha=data.get('alpha', 0.1),
                   checkpoint_id=data.get('checkpoint', ''), pair_count=data.get('pairs', 0),
                   failures=data.get('failures', {}))


def select_best(scores: Dict[FeatureLocator, Optional[float]]) -> FeatureLocator:
    """Highest score; ties go to the smaller timestep, then the smaller layer name."""
    valid = {loc: s for loc, s in scores.items() if s is not None}
    if not valid:
        raise GridSearchError("Every grid-search cell failed")
    top = max(valid.values())
    return min(loc for loc, s in valid.items() if s == top)


def score_cell(pairs: Sequence[BenchmarkPair], locator: FeatureLocator,
               extract: FeatureSource, alpha: float) -> float:
    """M(t, l): mean over pairs of the per-pair PCK."""
    per_pair = []
    for pair in pairs:
        source = extract(pair.source_image, locator)
        target = extract(pair.target_image, locator)
        mapping = dense_match(source, target)
        predictions = predict_keypoints(mapping, pair.keypoints)
        per_pair.append(pck_score(predictions, pair.keypoints, alpha))
    return float(np.mean(per_pair))


def grid_search(
    pairs: Sequence[BenchmarkPair],
    timesteps: Sequence[int],
    layers: Sequence[str],
    alpha: float,
    extract: FeatureSource,
    workers: int = 1,
    checkpoint_id: str = ''
) -> GridSearchResult:
    """
    Score every (t, l) cell and pick the best.

    A cell whose extraction or matching raises is logged and recorded as
    missing; the search only fails when every cell does.
    """
    if not pairs or not timesteps or not layers:
        raise ValidationError("Grid search needs non-empty pairs, timesteps and layers")

    cells = [FeatureLocator(int(t), l) for t in timesteps for l in layers]
    scores: Dict[FeatureLocator, Optional[float]] = {}
    failures: Dict[str, str] = {}

    def run(locator: FeatureLocator):
        try:
            return locator, score_cell(pairs, locator, extract, alpha), None
        except Exception as e:
            logger.warning(f"Grid cell t={locator.timestep} l={locator.layer} failed: {e}")
            return locator, None, str(e)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(run, cells), total=len(cells), desc='grid search'))
    else:
        results = [run(cell) for cell in tqdm(cells, desc='grid search')]

    for locator, score, error in results:
        scores[locator] = score
        if error is not None:
            failures[f"{locator.timestep}/{locator.layer}"] = error
        else:
            logger.info(f"M(t={locator.timestep}, l={locator.layer}) = {score:.4f}")

    best = select_best(scores)
    logger.info(f"Best locator t*={best.timestep} l*={best.layer} (M={scores[best]:.4f})")
    return GridSearchResult(scores=scores, best=best, alpha=alpha, checkpoint_id=checkpoint_id,
                            pair_count=len(pairs), failures=failures)


# ============================================================================
# locator cache
# ============================================================================

def save_locator_cache(result: GridSearchResult, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, 'w') as f:
        json.dump(result.to_dict(), f, indent=2)
        f.write('\n')
    os.replace(tmp, path)
    logger.info(f"Cached locator to {path}")


def load_locator_cache(path: str, checkpoint_id: Optional[str] = None) -> Optional[GridSearchResult]:
    """Cached result, or None when absent or computed for another checkpoint."""
    if not os.path.exists(path):
        return None
    with open(path) as f:
        result = GridSearchResult.from_dict(json.load(f))
    if checkpoint_id and result.checkpoint_id and result.checkpoint_id != checkpoint_id:
        logger.warning(
            f"Locator cache {path} was built for {result.checkpoint_id}, not {checkpoint_id}; ignoring"
        )
        return None
    return result
