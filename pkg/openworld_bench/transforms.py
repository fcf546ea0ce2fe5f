"""
Random input transforms for expectation-over-transformation attacks.

Geometric warps use nearest-neighbour sampling and pass gradients straight
through; the brightness shift and the final [0, 1] clamp are differentiated exactly.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class Transform:
    brightness: float = 0.0
    scale: float = 1.0
    angle_deg: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.brightness == 0.0 and self.scale == 1.0 and self.angle_deg == 0.0

    def warp(self, x: np.ndarray) -> np.ndarray:
        """Nearest-neighbour rotation and rescale about the image centre; outside pixels become 0."""
        if self.scale == 1.0 and self.angle_deg == 0.0:
            return x
        height, width = x.shape[-2:]
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        theta = np.deg2rad(self.angle_deg)
        cos, sin = np.cos(theta), np.sin(theta)
        dy, dx = (yy - cy) / self.scale, (xx - cx) / self.scale
        src_y = np.floor(cos * dy - sin * dx + cy + 0.5).astype(np.int64)
        src_x = np.floor(sin * dy + cos * dx + cx + 0.5).astype(np.int64)
        valid = (src_y >= 0) & (src_y < height) & (src_x >= 0) & (src_x < width)
        out = np.zeros_like(x)
        out[..., valid] = x[..., src_y[valid], src_x[valid]]
        return out

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return x
        return np.clip(self.warp(x) + self.brightness, 0.0, 1.0)

    def apply(self, t: Tensor) -> Tensor:
        if self.is_identity:
            return t
        warped = ad.straight_through(t, self.warp, op='warp')
        if self.brightness:
            warped = ad.add(warped, self.brightness)
        return ad.clamp(warped, 0.0, 1.0)


@dataclass(frozen=True)
class TransformSampler:
    """
    Draws brightness b in [-brightness, brightness], scale s in ``scale_range`` and
    rotation in [-max_rotation_deg, max_rotation_deg], all uniformly.
    """
    brightness: float = 0.2
    scale_range: Tuple[float, float] = (0.8, 1.2)
    max_rotation_deg: float = 15.0
    identity: bool = False

    def sample(self, rng: np.random.Generator, count: int) -> List[Transform]:
        if self.identity:
            return [Transform() for _ in range(count)]
        return [
            Transform(
                brightness=float(rng.uniform(-self.brightness, self.brightness)),
                scale=float(rng.uniform(*self.scale_range)),
                angle_deg=float(rng.uniform(-self.max_rotation_deg, self.max_rotation_deg)),
            )
            for _ in range(count)
        ]


def identity_sampler() -> TransformSampler:
    return TransformSampler(identity=True)


def pixel_shift(x: np.ndarray, amount: float) -> np.ndarray:
    """Move every pixel ``amount`` towards zero (clipped); a start-point trick against MagNet."""
    if amount <= 0:
        return x
    return np.clip(x - amount, 0.0, 1.0)
