"""Pyramid position encoding over the square token grid, and the sinusoidal ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat_rows, grouped_conv2d, reshape, slice_rows, transpose

KERNEL_SIZES = (3, 5, 7)
SINUSOID_SCALE = 1e-3


class GridError(ValueError):
    """Patch-token count is not a perfect square."""


@dataclass
class PPEGWeights:
    k3: Tensor
    k5: Tensor
    k7: Tensor

    @classmethod
    def zeros(cls, dim: int) -> "PPEGWeights":
        return cls(*(Tensor(np.zeros((dim, k, k)), True) for k in KERNEL_SIZES))

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = 0.1) -> "PPEGWeights":
        return cls(*(Tensor(rng.normal(0.0, scale / k, (dim, k, k)), True) for k in KERNEL_SIZES))

    def parameters(self) -> list[Tensor]:
        return [self.k3, self.k5, self.k7]


def grid_side(n_patches: int) -> int:
    side = math.isqrt(n_patches)
    if side * side != n_patches or n_patches < 1:
        raise GridError(f"{n_patches} patch tokens do not form a square grid")
    return side


def ppeg_forward(h: Tensor, weights: PPEGWeights) -> Tensor:
    """Class token passes through; patch tokens get the 3/5/7 depthwise convs added.

    Patch rows are laid out row-major on the grid and flattened back in the
    same order.
    """
    s, d = h.shape
    side = grid_side(s - 1)
    cls_tok = slice_rows(h, 0, 1)
    grid = transpose(reshape(slice_rows(h, 1, s), (side, side, d)), (2, 0, 1))
    fused = grid
    for kernels in weights.parameters():
        fused = fused + grouped_conv2d(grid, kernels)
    tokens = reshape(transpose(fused, (1, 2, 0)), (s - 1, d))
    return concat_rows([cls_tok, tokens])


def sinusoid_table(rows: int, dim: int) -> np.ndarray:
    pos = np.arange(rows, dtype=np.float64)[:, None]
    rates = 10000.0 ** (-(np.arange(dim) // 2 * 2) / dim)
    angles = pos * rates[None, :]
    table = np.empty((rows, dim))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


def sinusoidal_encoding(h: Tensor) -> Tensor:
    """Add the fixed sine/cosine table scaled by 1e-3; position = row index."""
    return h + SINUSOID_SCALE * sinusoid_table(*h.shape)
