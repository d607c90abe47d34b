"""
Keypoint benchmark: data model, manifest I/O and PCK.

Manifest format (one JSON object per line, SPair-71k field names):

    {"pair_id": "aeroplane-0001", "src_imname": "images/a.jpg",
     "trg_imname": "images/b.jpg", "src_imsize": [w, h, 3],
     "trg_imsize": [w, h, 3], "src_kps": [[x, y], ...],
     "trg_kps": [[x, y], ...]}

Image paths are resolved relative to the manifest's directory.
"""

import glob
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from components.errors import ManifestError, ValidationError
from .matcher import CorrespondenceMap

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


@dataclass(frozen=True)
class KeypointPair:
    """One annotated correspondence: (x, y) in the source and target images."""
    pair_id: str
    source: Point
    target: Point
    source_size: Tuple[int, int]      # (height, width)
    target_size: Tuple[int, int]

    def __post_init__(self):
        for name, (x, y), (h, w) in (('source', self.source, self.source_size),
                                     ('target', self.target, self.target_size)):
            if not (0 <= x < w and 0 <= y < h):
                raise ValidationError(
                    f"{self.pair_id}: {name} keypoint ({x}, {y}) outside a {w}x{h} image"
                )


@dataclass
class BenchmarkPair:
    pair_id: str
    source_image: str
    target_image: str
    source_size: Tuple[int, int]      # (height, width)
    target_size: Tuple[int, int]
    keypoints: List[KeypointPair] = field(default_factory=list)
    category: str = ''

    def to_record(self, base_dir: str = '') -> Dict:
        def rel(path):
            return os.path.relpath(path, base_dir) if base_dir else path
        return {
            'pair_id': self.pair_id,
            'category': self.category,
            'src_imname': rel(self.source_image),
            'trg_imname': rel(self.target_image),
            'src_imsize': [self.source_size[1], self.source_size[0], 3],
            'trg_imsize': [self.target_size[1], self.target_size[0], 3],
            'src_kps': [list(k.source) for k in self.keypoints],
            'trg_kps': [list(k.target) for k in self.keypoints],
        }


# ============================================================================
# coordinate bridging
# ============================================================================

def image_to_grid(point: Point, image_size: Tuple[int, int], grid: Tuple[int, int]) -> Tuple[int, int]:
    """(x, y) pixel -> (row, col) of the grid cell containing it."""
    x, y = point
    h, w = image_size
    gh, gw = grid
    row = min(max(int(y * gh / h), 0), gh - 1)
    col = min(max(int(x * gw / w), 0), gw - 1)
    return row, col


def grid_to_image(cell: Tuple[int, int], grid: Tuple[int, int], image_size: Tuple[int, int]) -> Point:
    """(row, col) -> (x, y) pixel at the cell centre."""
    row, col = cell
    gh, gw = grid
    h, w = image_size
    return (col + 0.5) * w / gw, (row + 0.5) * h / gh


def predict_keypoints(mapping: CorrespondenceMap, keypoints: Sequence[KeypointPair]) -> List[Point]:
    """Transfer every source keypoint through the map into target-image coordinates."""
    predictions = []
    for kp in keypoints:
        cell = image_to_grid(kp.source, kp.source_size, mapping.source_grid)
        match = mapping.lookup(*cell)
        predictions.append(grid_to_image(match, mapping.target_grid, kp.target_size))
    return predictions


def pck_score(predictions: Sequence[Point], keypoints: Sequence[KeypointPair], alpha: float) -> float:
    """
    Fraction of keypoints whose prediction lies within
    alpha * max(target height, target width) of the annotation.
    """
    if alpha <= 0:
        raise ValidationError("PCK alpha must be > 0")
    if not keypoints:
        raise ValidationError("PCK needs at least one keypoint")
    if len(predictions) != len(keypoints):
        raise ValidationError(
            f"{len(predictions)} predictions for {len(keypoints)} keypoints"
        )

    pred = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray([kp.target for kp in keypoints], dtype=np.float64)
    limits = np.asarray([alpha * max(kp.target_size) for kp in keypoints])
    distances = np.linalg.norm(pred - truth, axis=1)
    return float(np.mean(distances <= limits))


# ============================================================================
# manifests
# ============================================================================

def _pair_from_record(record: Dict, base_dir: str, line_no: int) -> BenchmarkPair:
    pair_id = str(record.get('pair_id', f"pair-{line_no}"))
    src_w, src_h = record['src_imsize'][:2]
    trg_w, trg_h = record['trg_imsize'][:2]
    src_kps, trg_kps = record['src_kps'], record['trg_kps']
    if len(src_kps) != len(trg_kps):
        raise ValueError(f"{len(src_kps)} source vs {len(trg_kps)} target keypoints")
    if not src_kps:
        raise ValueError("no keypoints")

    source_size = (int(src_h), int(src_w))
    target_size = (int(trg_h), int(trg_w))
    keypoints = [
        KeypointPair(pair_id, (float(s[0]), float(s[1])), (float(t[0]), float(t[1])),
                     source_size, target_size)
        for s, t in zip(src_kps, trg_kps)
    ]
    source_image = os.path.join(base_dir, record['src_imname'])
    target_image = os.path.join(base_dir, record['trg_imname'])
    for path in (source_image, target_image):
        if not os.path.exists(path):
            raise ValueError(f"image not found: {path}")
    return BenchmarkPair(pair_id, source_image, target_image, source_size, target_size,
                         keypoints, record.get('category', ''))


def load_keypoint_manifest(path: str) -> List[BenchmarkPair]:
    """Parse a keypoint manifest. Every bad line is reported together."""
    if not os.path.exists(path):
        raise ManifestError(f"Keypoint manifest not found: {path}")

    base_dir = os.path.dirname(os.path.abspath(path))
    pairs, errors = [], []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                pairs.append(_pair_from_record(json.loads(line), base_dir, line_no))
            except (ValueError, KeyError, TypeError, IndexError, ValidationError) as e:
                errors.append(f"line {line_no}: {e}")

    if errors:
        raise ManifestError(f"Invalid keypoint manifest {path}", errors)
    if not pairs:
        raise ManifestError(f"Keypoint manifest {path} has no pairs")

    ids = [p.pair_id for p in pairs]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ManifestError(f"Duplicate pair ids in {path}", duplicates)

    logger.info(f"Loaded {len(pairs)} keypoint pairs from {path}")
    return pairs


def write_keypoint_manifest(pairs: Sequence[BenchmarkPair], path: str) -> None:
    base_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(base_dir, exist_ok=True)
    with open(path, 'w') as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_record(base_dir)) + '\n')


def load_spair(root: str, split: str = 'test', limit: Optional[int] = 20,
               categories: Optional[Sequence[str]] = None) -> List[BenchmarkPair]:
    """
    Read pairs from an SPair-71k checkout
    (``PairAnnotation/<split>/*.json`` plus ``JPEGImages/<category>/``).

    Annotation files are taken in sorted order; ``limit`` keeps the first N.
    """
    files = sorted(glob.glob(os.path.join(root, 'PairAnnotation', split, '*.json')))
    if not files:
        raise ManifestError(f"No SPair-71k annotations under {root} for split '{split}'")

    pairs, errors = [], []
    for path in files:
        with open(path) as f:
            record = json.load(f)
        category = record.get('category', '')
        if categories and category not in categories:
            continue
        record['pair_id'] = os.path.splitext(os.path.basename(path))[0]
        record['src_imname'] = os.path.join('JPEGImages', category, record['src_imname'])
        record['trg_imname'] = os.path.join('JPEGImages', category, record['trg_imname'])
        try:
            pairs.append(_pair_from_record(record, root, len(pairs) + 1))
        except (ValueError, KeyError, TypeError, IndexError, ValidationError) as e:
            errors.append(f"{os.path.basename(path)}: {e}")
        if limit and len(pairs) >= limit:
            break

    if errors:
        logger.warning(f"Skipped {len(errors)} SPair annotations: {errors[:3]}")
    logger.info(f"Loaded {len(pairs)} SPair-71k pairs from {root} ({split})")
    return pairs
