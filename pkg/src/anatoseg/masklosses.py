"""Soft-mask algebra, supervised losses and the relation-gated anatomy loss.

All functions take :class:`~anatoseg.diffops.Tensor` or array masks; arrays
are treated as constants.  A leading batch axis is allowed: reductions run
over the trailing (H, W) axes and the result is averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffops as F
from .diffops import Tensor
from .taxonomy import Relation

EPS = 1.0
BCE_CLAMP = 1e-7
DCE_MODES = ("similarity", "loss")


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else F.DTYPE
    return Tensor(np.asarray(x), dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = _t(a, like), _t(b, like)
    if a.shape != b.shape:
        raise F.ShapeError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def soft_dice(a, b, eps: float = EPS) -> Tensor:
    """(2 sum(ab) + eps) / (sum(a) + sum(b) + eps), per mask, then batch mean."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a, b = _pair(a, b)
    axes = (-2, -1) if a.ndim >= 2 else None
    num = (a * b).sum(axis=axes) * 2.0 + eps
    den = a.sum(axis=axes) + b.sum(axis=axes) + eps
    return (num / den).mean()


def soft_union(a, b) -> Tensor:
    """Probabilistic union a + b - ab."""
    a, b = _pair(a, b)
    return a + b - a * b


@dataclass(frozen=True)
class AnatomyCoefficients:
    c_complement: float
    c_union: float
    c_overlap: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.c_complement, self.c_union, self.c_overlap)


def coefficients(m: int) -> AnatomyCoefficients:
    """Polynomial gates selecting one term of the pair loss for m in {1, -1, 2}."""
    if m not in (-1, 1, 2):
        raise ValueError(f"no anatomy loss for relation code {m}")
    # + 0.0 folds the -0.0 the polynomials produce into 0.0
    return AnatomyCoefficients(
        (m + 1) * (m - 2) / -2 + 0.0,
        -(m - 1) * (m - 2) / 6 + 0.0,
        (m - 1) * (m + 1) / 3 + 0.0,
    )


def _dce(a, b, eps: float, mode: str) -> Tensor:
    s = soft_dice(a, b, eps)
    if mode == "similarity":
        return s
    if mode == "loss":
        return 1.0 - s
    raise ValueError(f"unknown anatomy-dce mode {mode!r}")


def anatomy_pair_loss(y_i, y_j_pred, m: int, eps: float = EPS, mode: str = "similarity") -> Tensor:
    """Constraint between a labeled mask ``y_i`` and a prediction for class j.

    Only the term whose coefficient is nonzero is evaluated; the labeled
    mask is a constant.
    """
    coef = coefficients(int(m))
    pred = _t(y_j_pred)
    y = np.asarray(y_i.data if isinstance(y_i, Tensor) else y_i, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise F.ShapeError(f"mask shape mismatch: {y.shape} vs {pred.shape}")
    total = None
    if coef.c_complement:
        term = _dce(1.0 - y, pred, eps, mode) * coef.c_complement
        total = term
    if coef.c_union:
        term = _dce(y, soft_union(y, pred), eps, mode) * coef.c_union
        total = term if total is None else total + term
    if coef.c_overlap:
        term = _dce(y, pred, eps, mode) * coef.c_overlap
        total = term if total is None else total + term
    return total


def dice_loss(y, p, eps: float = EPS) -> Tensor:
    return 1.0 - soft_dice(y, p, eps)


def bce(y, p) -> Tensor:
    """Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    y, p = _pair(y, p)
    pc = F.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    yd = y.data
    ll = F.log(pc) * yd + F.log(1.0 - pc) * (1.0 - yd)
    return -(ll.mean())


def supervised_loss(y, p, eps: float = EPS) -> Tensor:
    return dice_loss(y, p, eps) + bce(y, p)


def total_loss(y_i, y_i_pred, cross_preds: Mapping[int, object], matrix_row: Sequence[int],
               lambda_hats: float, i: int | None = None, eps: float = EPS,
               mode: str = "similarity") -> Tensor:
    """Supervised Dice + BCE on class i plus lambda times the anatomy terms for each j."""
    loss = supervised_loss(y_i, y_i_pred, eps)
    for j, pred in cross_preds.items():
        m = int(matrix_row[j])
        if j == i or m == Relation.UNKNOWN:
            raise ValueError(f"cross prediction for class {j} is not constrained (code {m})")
        if lambda_hats:
            loss = loss + anatomy_pair_loss(y_i, pred, m, eps, mode) * lambda_hats
    return loss
