from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from tensor.tensor import Tensor
from utils.errors import DimensionError


@dataclass
class TokenMask:
    """Binary patch grid: 1 where an image token survived pruning."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise DimensionError(f"mask grid must be square, got shape {self.grid.shape}")

    @classmethod
    def from_positions(cls, positions: Iterable[int], grid_size: int) -> "TokenMask":
        flat = np.zeros(grid_size * grid_size, dtype=bool)
        flat[np.asarray(list(positions), dtype=np.int64)] = True
        return cls(flat.reshape(grid_size, grid_size))

    @classmethod
    def all_ones(cls, grid_size: int) -> "TokenMask":
        return cls(np.ones((grid_size, grid_size), dtype=bool))

    @property
    def grid_size(self) -> int:
        return self.grid.shape[0]

    @property
    def ones(self) -> int:
        return int(self.grid.sum())

    @property
    def sparse_ratio(self) -> float:
        return 1.0 - self.ones / self.grid.size

    def positions(self) -> np.ndarray:
        """Flat patch indices of the kept tokens, ascending."""
        return np.flatnonzero(self.grid.reshape(-1))


def pixel_mask(mask: Union[TokenMask, np.ndarray], patch_size: int) -> np.ndarray:
    """Expand a patch grid to a per-pixel 0/1 map."""
    grid = mask.grid if isinstance(mask, TokenMask) else np.asarray(mask, dtype=bool)
    return np.kron(grid.astype(np.float32), np.ones((patch_size, patch_size), dtype=np.float32))


def apply_mask(image, mask: Union[TokenMask, np.ndarray], patch_size: int) -> np.ndarray:
    """Zero every pixel of the patches the mask drops; leave the rest untouched."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    grid = mask.grid if isinstance(mask, TokenMask) else np.asarray(mask, dtype=bool)
    height, width = data.shape[-2:]
    if grid.shape != (height // patch_size, width // patch_size) or height % patch_size or width % patch_size:
        raise DimensionError(f"mask grid {grid.shape} does not match a {height}x{width} image with patch {patch_size}")
    return np.where(pixel_mask(grid, patch_size) > 0, data, np.zeros_like(data))


def stack_masks(masks: Iterable[TokenMask]) -> np.ndarray:
    return np.stack([m.grid for m in masks])


def positions_batch(masks: Iterable[TokenMask]) -> np.ndarray:
    """(B, m) kept positions; every mask must keep the same number of tokens."""
    rows = [m.positions() for m in masks]
    counts = {len(r) for r in rows}
    if len(counts) != 1:
        raise DimensionError(f"masks in a batch keep different token counts: {sorted(counts)}")
    return np.stack(rows)
