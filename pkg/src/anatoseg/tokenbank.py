"""Class and scale tokens with block-aligned channel slices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffops import DTYPE, Parameter

N_SCALES = 4
TOKEN_STD = 0.02


@dataclass(frozen=True)
class BlockWidths:
    """Channel widths: ``blocks[k]`` is the input width of encoder block k+1."""

    blocks: tuple[int, ...]
    d_gap: int

    def __post_init__(self):
        if not self.blocks or any(w <= 0 for w in self.blocks) or self.d_gap <= 0:
            raise ValueError(f"widths must be positive: {self.blocks}, d_gap={self.d_gap}")

    @property
    def d(self) -> int:
        return sum(self.blocks) + self.d_gap

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def slice_bounds(widths: BlockWidths, b: int) -> tuple[int, int]:
    """Half-open token slice for encoder block ``b`` (1-based)."""
    if not 1 <= b <= widths.n_blocks:
        raise IndexError(f"block index {b} out of range 1..{widths.n_blocks}")
    start = sum(widths.blocks[:b - 1])
    return start, start + widths.blocks[b - 1]


def _init_rows(rows: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((rows, d)) * TOKEN_STD).astype(DTYPE)


class TokenBank:
    """Trainable class tokens ``class_tokens`` (n x d) and scale tokens ``scale_tokens`` (4 x d)."""

    def __init__(self, n_classes: int, widths: BlockWidths, seed: int = 0):
        self.widths = widths
        rng = np.random.default_rng(seed)
        c_seed, s_seed = rng.integers(0, 2**31, size=2)
        self.class_tokens = Parameter(_init_rows(n_classes, widths.d, int(c_seed)), "tokens.class")
        self.scale_tokens = Parameter(_init_rows(N_SCALES, widths.d, int(s_seed)), "tokens.scale")

    @property
    def n_classes(self) -> int:
        return self.class_tokens.shape[0]

    @property
    def d(self) -> int:
        return self.widths.d

    def parameters(self) -> list[Parameter]:
        return [self.class_tokens, self.scale_tokens]

    def check_ids(self, class_ids: Sequence[int], scale_ids: Sequence[int]) -> None:
        for i in class_ids:
            if not 0 <= i < self.n_classes:
                raise IndexError(f"class id {i} out of range 0..{self.n_classes - 1}")
        for m in scale_ids:
            if not 0 <= m < N_SCALES:
                raise IndexError(f"scale id {m} out of range 0..{N_SCALES - 1}")

    def gap_slice(self, i: int, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Trailing ``d_gap`` entries of class token ``i`` and scale token ``m``."""
        self.check_ids([i], [m])
        start = self.d - self.widths.d_gap
        return self.class_tokens.data[i, start:], self.scale_tokens.data[m, start:]

    def add_class(self, seed: int) -> "TokenBank":
        """Return a bank with one extra class row; existing rows are copied bit-for-bit."""
        new = TokenBank.__new__(TokenBank)
        new.widths = self.widths
        row = _init_rows(1, self.d, seed)
        new.class_tokens = Parameter(np.concatenate([self.class_tokens.data, row]), "tokens.class")
        new.scale_tokens = Parameter(self.scale_tokens.data.copy(), "tokens.scale")
        return new

    def astype(self, dtype) -> "TokenBank":
        new = TokenBank.__new__(TokenBank)
        new.widths = self.widths
        new.class_tokens = Parameter(self.class_tokens.data, "tokens.class", dtype=dtype)
        new.scale_tokens = Parameter(self.scale_tokens.data, "tokens.scale", dtype=dtype)
        return new
