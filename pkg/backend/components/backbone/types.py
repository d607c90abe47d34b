"""
Backbone data types: schedules, latents, feature locators, feature maps and
captured attention.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from components.errors import DimensionMismatchError, InvalidLocatorError, NonFiniteLatentError


@dataclass
class DiffusionSchedule:
    """
    Noise schedule restricted to the T inference steps.

    ``betas[i-1]`` is the effective variance added between trajectory index
    i-1 and i, so ``alphas_cumprod`` reproduces the training schedule's
    cumulative products at the sampled ``timesteps``.
    """
    total_steps: int
    betas: np.ndarray
    timesteps: np.ndarray                 # training-timestep index for steps 1..T
    initial_alpha_cumprod: float = 1.0    # alpha-bar of the clean latent (index 0)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if len(self.betas) != self.total_steps or len(self.timesteps) != self.total_steps:
            raise ValueError(
                f"Schedule expects {self.total_steps} betas/timesteps, "
                f"got {len(self.betas)}/{len(self.timesteps)}"
            )
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("Every beta must lie strictly inside (0, 1)")

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alphas_cumprod(self) -> np.ndarray:
        """Alpha-bar for trajectory indices 0..T (length T+1)."""
        return self.initial_alpha_cumprod * np.concatenate([[1.0], np.cumprod(self.alphas)])

    @classmethod
    def from_training(
        cls,
        train_alphas_cumprod: Sequence[float],
        total_steps: int,
        steps_offset: int = 0,
        final_alpha_cumprod: Optional[float] = None
    ) -> 'DiffusionSchedule':
        """
        Subsample a training schedule (usually 1000 steps) the way DDIM does:
        evenly spaced timesteps ``i * stride + steps_offset``.

        The offset shrinks so the last timestep stays inside the training
        schedule. The clean point falls back to alpha-bar 1 when the given
        final alpha-bar is not above the first sampled one.
        """
        train = np.asarray(train_alphas_cumprod, dtype=np.float64)
        stride = len(train) // total_steps if total_steps > 0 else 0
        if stride < 1:
            raise ValueError(f"Cannot take {total_steps} steps from a {len(train)}-step schedule")
        offset = max(0, min(steps_offset, len(train) - 1 - (total_steps - 1) * stride))
        timesteps = np.arange(total_steps) * stride + offset
        initial = float(train[0] if final_alpha_cumprod is None else final_alpha_cumprod)
        if initial <= train[timesteps[0]]:
            initial = 1.0
        sampled = np.concatenate([[initial], train[timesteps]])
        betas = 1.0 - sampled[1:] / sampled[:-1]
        return cls(total_steps=total_steps, betas=betas, timesteps=timesteps,
                   initial_alpha_cumprod=initial)


@dataclass
class LatentTensor:
    """A (channels, height, width) latent tied to the image size it encodes."""
    data: torch.Tensor
    image_size: Tuple[int, int]

    def __post_init__(self):
        if self.data.dim() != 3:
            raise DimensionMismatchError(
                f"Latent must be (channels, height, width), got shape {tuple(self.data.shape)}"
            )

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def check_finite(self, timestep: Optional[int] = None) -> 'LatentTensor':
        if not torch.isfinite(self.data).all():
            where = "" if timestep is None else f" at timestep {timestep}"
            raise NonFiniteLatentError(f"Latent contains non-finite values{where}", timestep)
        return self

    def with_data(self, data: torch.Tensor) -> 'LatentTensor':
        return LatentTensor(data=data, image_size=self.image_size)


@dataclass(frozen=True, order=True)
class FeatureLocator:
    """(timestep, layer) address of an intermediate U-Net activation."""
    timestep: int
    layer: str

    def validate(self, total_steps: int, layers: Sequence[str]) -> 'FeatureLocator':
        if not 1 <= self.timestep <= total_steps:
            raise InvalidLocatorError(
                f"Timestep {self.timestep} outside [1, {total_steps}]"
            )
        if self.layer not in layers:
            raise InvalidLocatorError(
                f"Layer '{self.layer}' is not a candidate layer ({', '.join(layers)})"
            )
        return self

    def to_dict(self) -> Dict:
        return {'timestep': self.timestep, 'layer': self.layer}


@dataclass
class FeatureMap:
    locator: FeatureLocator
    data: torch.Tensor          # (feature_dim, h, w)
    source: str = ''

    def __post_init__(self):
        if self.data.dim() != 3:
            raise DimensionMismatchError(
                f"Feature map must be (dim, h, w), got {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise NonFiniteLatentError(
                f"Feature map for {self.source or 'image'} at {self.locator} is not finite",
                self.locator.timestep,
            )

    @property
    def grid(self) -> Tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])

    @property
    def feature_dim(self) -> int:
        return int(self.data.shape[0])


@dataclass
class AttentionRecord:
    """Q/K/V of one self-attention block, split per head: (heads, tokens, d)."""
    block: str
    query: torch.Tensor
    key: torch.Tensor
    value: torch.Tensor
    heads: int

    def __post_init__(self):
        q, k, v = self.query.shape, self.key.shape, self.value.shape
        if not (q[-1] == k[-1] == v[-1]) or q[-1] <= 0:
            raise DimensionMismatchError(f"{self.block}: head dimensions disagree ({q}, {k}, {v})")
        if not (q[-2] == k[-2] == v[-2]):
            raise DimensionMismatchError(f"{self.block}: token counts disagree ({q}, {k}, {v})")

    @property
    def head_dim(self) -> int:
        return int(self.query.shape[-1])

    @property
    def tokens(self) -> int:
        return int(self.query.shape[-2])


@dataclass
class AttentionBundle:
    timestep: int
    records: List[AttentionRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def by_block(self) -> Dict[str, AttentionRecord]:
        return {r.block: r for r in self.records}
