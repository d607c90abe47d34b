"""
Dense cosine matching between two feature maps.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from components.backbone.types import FeatureLocator, FeatureMap
from components.errors import DimensionMismatchError, InvalidLocatorError

logger = logging.getLogger(__name__)

# rows of the similarity matrix computed per chunk (64x64 grids -> 4 chunks)
CHUNK_ROWS = 1024


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Cosine of the angle between two vectors, clamped to [-1, 1].
    A zero vector on either side gives 0.0.
    """
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    if a.numel() != b.numel():
        raise DimensionMismatchError(f"Vectors differ in length: {a.numel()} vs {b.numel()}")
    norm = a.norm() * b.norm()
    if norm == 0:
        return 0.0
    return float(torch.clamp(torch.dot(a, b) / norm, -1.0, 1.0))


@dataclass
class CorrespondenceMap:
    """
    Total map from every source grid location to one target location.

    targets[r, c] = (row, col) in the target grid; scores[r, c] is the cosine
    similarity of that match.
    """
    targets: torch.Tensor                 # (h_c, w_c, 2) long
    scores: torch.Tensor                  # (h_c, w_c) float
    target_grid: Tuple[int, int]
    locator: Optional[FeatureLocator] = None

    def __post_init__(self):
        if self.targets.dim() != 3 or self.targets.shape[-1] != 2:
            raise DimensionMismatchError(f"targets must be (h, w, 2), got {tuple(self.targets.shape)}")
        if tuple(self.scores.shape) != tuple(self.targets.shape[:2]):
            raise DimensionMismatchError("scores and targets cover different grids")
        rows, cols = self.targets[..., 0], self.targets[..., 1]
        th, tw = self.target_grid
        if rows.numel() and (rows.min() < 0 or rows.max() >= th or cols.min() < 0 or cols.max() >= tw):
            raise DimensionMismatchError("Correspondence target outside the target grid")
        if self.scores.numel() and (self.scores.min() < -1 or self.scores.max() > 1):
            raise DimensionMismatchError("Correspondence scores must lie in [-1, 1]")

    @property
    def source_grid(self) -> Tuple[int, int]:
        return int(self.targets.shape[0]), int(self.targets.shape[1])

    def __len__(self) -> int:
        h, w = self.source_grid
        return h * w

    def flat_targets(self) -> torch.Tensor:
        """Flat target index for every source location, in row-major order."""
        return (self.targets[..., 0] * self.target_grid[1] + self.targets[..., 1]).flatten()

    def lookup(self, row: int, col: int) -> Tuple[int, int]:
        r, c = self.targets[row, col].tolist()
        return int(r), int(c)

    def resample(self, source_grid: Tuple[int, int], target_grid: Tuple[int, int]) -> 'CorrespondenceMap':
        """
        Nearest-neighbour rescale to different source/target grids.
        Each new source cell reads the match of the old cell containing its
        centre; matched coordinates are scaled to the new target grid.
        """
        if tuple(source_grid) == self.source_grid and tuple(target_grid) == tuple(self.target_grid):
            return self
        sh, sw = self.source_grid
        nh, nw = source_grid
        th, tw = self.target_grid
        mh, mw = target_grid

        src_rows = ((torch.arange(nh, dtype=torch.float64) + 0.5) * sh / nh).long().clamp(0, sh - 1)
        src_cols = ((torch.arange(nw, dtype=torch.float64) + 0.5) * sw / nw).long().clamp(0, sw - 1)
        picked = self.targets[src_rows][:, src_cols]
        scores = self.scores[src_rows][:, src_cols]

        rows = ((picked[..., 0].double() + 0.5) * mh / th).long().clamp(0, mh - 1)
        cols = ((picked[..., 1].double() + 0.5) * mw / tw).long().clamp(0, mw - 1)
        return CorrespondenceMap(
            targets=torch.stack([rows, cols], dim=-1),
            scores=scores.clone(),
            target_grid=(mh, mw),
            locator=self.locator,
        )

    @classmethod
    def identity(cls, grid: Tuple[int, int]) -> 'CorrespondenceMap':
        h, w = grid
        rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing='ij')
        return cls(targets=torch.stack([rows, cols], dim=-1),
                   scores=torch.ones(h, w, dtype=torch.float64),
                   target_grid=(h, w))


def dense_match(content: FeatureMap, style: FeatureMap) -> CorrespondenceMap:
    """
    Match every content location to its most cosine-similar style location.

    Exact O((hw)^2) search. Ties go to the first maximum in row-major order;
    zero vectors have similarity 0 with everything.
    """
    if content.locator != style.locator:
        raise InvalidLocatorError(
            f"Feature maps come from different locators: {content.locator} vs {style.locator}"
        )
    if content.feature_dim != style.feature_dim:
        raise DimensionMismatchError(
            f"Feature dimensions differ: {content.feature_dim} vs {style.feature_dim}"
        )
    (hc, wc), (hs, ws) = content.grid, style.grid
    if hc * wc == 0 or hs * ws == 0 or content.feature_dim == 0:
        raise DimensionMismatchError("Cannot match an empty feature map")

    src = F.normalize(content.data.reshape(content.feature_dim, -1).T.double(), dim=1)
    dst = F.normalize(style.data.reshape(style.feature_dim, -1).T.double(), dim=1)

    best_idx = []
    best_score = []
    for start in range(0, src.shape[0], CHUNK_ROWS):
        sim = src[start:start + CHUNK_ROWS] @ dst.T
        idx = sim.argmax(dim=1)
        score = sim.gather(1, idx.unsqueeze(1)).squeeze(1)
        best_idx.append(idx)
        best_score.append(score)
    idx = torch.cat(best_idx)
    score = torch.cat(best_score).clamp(-1.0, 1.0)

    targets = torch.stack([idx // ws, idx % ws], dim=-1).reshape(hc, wc, 2)
    return CorrespondenceMap(
        targets=targets,
        scores=score.reshape(hc, wc),
        target_grid=(hs, ws),
        locator=content.locator,
    )
