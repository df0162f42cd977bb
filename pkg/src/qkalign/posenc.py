"""Positional encodings for 2-D token grids and their distance-map analysis.

Two kinds are supported: the fixed 2-D sinusoidal encoding (frequency base
10000, row channels in the first half, column channels in the second,
interleaved sin/cos within each half) and a learnable table initialized
from a small zero-mean normal. The positional signal is added to the
query/key projection inputs only, never to values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add
from .errors import ContractError, DimensionError

KIND_FIXED = "fixed-sinusoidal"
KIND_LEARNABLE = "learnable"

LEARNABLE_INIT_STD = 0.02


@dataclass
class TokenSequence:
    """An (N, D) token tensor laid out on an (h, w) grid with N = h * w."""

    tokens: Tensor
    grid: tuple

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.data.shape[0] != h * w:
            raise DimensionError(
                f"token count {self.tokens.data.shape[0]} does not match grid {self.grid}"
            )


@dataclass
class PosEncoding:
    kind: str
    grid: tuple
    dim: int
    table: Tensor  # (h * w, dim); constant for fixed, parameter for learnable

    @property
    def n_positions(self) -> int:
        h, w = self.grid
        return h * w


def _axis_block(coords: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos block for one axis: (n,) -> (n, dim // 2)."""
    half = dim // 2
    pairs = dim // 4
    freqs = 10000.0 ** (-4.0 * np.arange(pairs) / dim)
    ang = coords[:, None] * freqs[None, :]
    block = np.empty((coords.shape[0], half))
    block[:, 0::2] = np.sin(ang)
    block[:, 1::2] = np.cos(ang)
    return block


def build_sinusoidal_2d(grid, dim: int) -> PosEncoding:
    """Fixed 2-D sinusoidal table over an (h, w) grid; dim must divide by 4."""
    h, w = grid
    if dim % 4 != 0:
        raise ContractError(f"sinusoidal dim must be divisible by 4, got {dim}")
    if h < 1 or w < 1:
        raise ContractError(f"grid must be positive, got {grid}")
    half = dim // 2
    row_block = _axis_block(np.arange(h, dtype=np.float64), dim)
    col_block = _axis_block(np.arange(w, dtype=np.float64), dim)
    table = np.empty((h * w, dim))
    table[:, :half] = np.repeat(row_block, w, axis=0)
    table[:, half:] = np.tile(col_block, (h, 1))
    return PosEncoding(KIND_FIXED, (h, w), dim, Tensor(table))


def build_learnable(grid, dim: int, rng: np.random.Generator,
                    std: float = LEARNABLE_INIT_STD) -> PosEncoding:
    h, w = grid
    if h < 1 or w < 1:
        raise ContractError(f"grid must be positive, got {grid}")
    table = rng.normal(0.0, std, size=(h * w, dim))
    return PosEncoding(KIND_LEARNABLE, (h, w), dim, Tensor(table, requires_grad=True))


def add_positional(tokens: TokenSequence, pe: PosEncoding):
    """Add the positional table to the query/key projection inputs.

    Returns the (q_input, k_input) pair; both alias the same sum since the
    same encoded tokens feed both projections. The value input is the
    caller's original token tensor, untouched.
    """
    if tokens.tokens.data.shape[0] != pe.n_positions:
        raise DimensionError(
            f"token count {tokens.tokens.data.shape[0]} does not match "
            f"positional grid {pe.grid}"
        )
    encoded = add(tokens.tokens, pe.table)
    return encoded, encoded


def pe_distance_map(pe: PosEncoding, anchor) -> np.ndarray:
    """L2 distance from the anchor position's encoding to every grid cell."""
    h, w = pe.grid
    ar, ac = anchor
    if not (0 <= ar < h and 0 <= ac < w):
        raise ContractError(f"anchor {anchor} outside grid {pe.grid}")
    table = pe.table.data
    ref = table[ar * w + ac]
    dist = np.sqrt(((table - ref) ** 2).sum(axis=1))
    return dist.reshape(h, w)
