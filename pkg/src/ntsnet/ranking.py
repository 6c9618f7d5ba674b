"""Pairwise ranking losses tying region informativeness to teacher confidence.

Pairs are ordered as (i, s) with C[i] < C[s]; the navigator should then
score region s above region i by at least ``margin``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Tensor, note_branch


@dataclass(frozen=True)
class ScorePair:
    informativeness: np.ndarray
    confidence: np.ndarray

    def __init__(self, informativeness, confidence):
        inf = np.asarray(informativeness, dtype=np.float64).reshape(-1)
        conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
        if inf.shape != conf.shape or inf.size < 1:
            raise ValueError(f"need equal non-empty lengths, got {inf.size} and {conf.size}")
        object.__setattr__(self, "informativeness", inf)
        object.__setattr__(self, "confidence", conf)

    def __len__(self) -> int:
        return self.informativeness.size


def _ordered_pairs(confidence: np.ndarray) -> np.ndarray:
    """Boolean (M, M) matrix, True at [i, s] when C[i] < C[s]."""
    return confidence[:, None] < confidence[None, :]


def _margins(sp: ScorePair) -> np.ndarray:
    """[i, s] -> I[s] - I[i]."""
    inf = sp.informativeness
    return inf[None, :] - inf[:, None]


def navigation_loss(sp: ScorePair, margin: float = 1.0) -> float:
    """Sum over pairs with C[i] < C[s] of max(margin - (I[s] - I[i]), 0)."""
    pairs = _ordered_pairs(sp.confidence)
    slack = np.maximum(margin - _margins(sp), 0.0)
    return float(slack[pairs].sum())


def navigation_loss_grad(sp: ScorePair, margin: float = 1.0) -> np.ndarray:
    """d navigation_loss / d I. A pair sitting exactly at the margin contributes 0."""
    active = _ordered_pairs(sp.confidence) & (_margins(sp) < margin)
    # active[i, s]: pushes I[s] down the loss (-1) and I[i] up the loss (+1)
    return active.sum(axis=1).astype(np.float64) - active.sum(axis=0)


def navigation_loss_op(informativeness: Tensor, confidence, margin: float = 1.0) -> Tensor:
    """Navigation loss as a graph node; ``confidence`` is a constant."""
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    inf = informativeness.data.reshape(-1).astype(np.float64)
    sp = ScorePair(inf, conf)
    pairs = _ordered_pairs(conf)
    active = pairs & (_margins(sp) < margin)
    note_branch("navigation_loss", active)
    value = np.asarray(navigation_loss(sp, margin), dtype=informativeness.dtype)
    grad = navigation_loss_grad(sp, margin).reshape(informativeness.shape)

    def backward(g):
        return ((g * grad).astype(informativeness.dtype),)

    return Tensor.from_op("navigation_loss", value, (informativeness,), backward)


def reverse_pair_count(sp: ScorePair) -> int:
    """Pairs with C[i] < C[s] whose informativeness is not strictly ordered the same way."""
    pairs = _ordered_pairs(sp.confidence)
    wrong = _margins(sp) <= 0
    return int((pairs & wrong).sum())


def pointwise_l2_loss(scores: Sequence[float], targets: Sequence[float]) -> float:
    f = np.asarray(scores, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {y.shape}")
    return float(((f - y) ** 2).sum())


def listwise_zero_one_loss(predicted: Sequence[int], target: Sequence[int]) -> int:
    p, t = list(predicted), list(target)
    if len(p) != len(t):
        raise ValueError(f"permutations differ in length: {len(p)} vs {len(t)}")
    for perm in (p, t):
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"{perm} is not a permutation of 0..{len(perm) - 1}")
    return int(p != t)


def kendall_tau(sp: ScorePair) -> float:
    """Rank agreement between informativeness and confidence.

    Pairs tied in confidence are left out of numerator and denominator;
    pairs tied only in informativeness count as neither concordant nor
    discordant.
    """
    m = len(sp)
    if m < 2:
        raise ValueError("Kendall tau needs at least two items")
    iu = np.triu_indices(m, k=1)
    dc = np.sign(sp.confidence[:, None] - sp.confidence[None, :])[iu]
    di = np.sign(sp.informativeness[:, None] - sp.informativeness[None, :])[iu]
    valid = dc != 0
    if not valid.any():
        raise ValueError("undefined correlation: all confidence pairs tied")
    return float((dc[valid] * di[valid]).sum() / valid.sum())
