"""Token risk scores, empirical VaR thresholding, selection masks and CVaR.

Quantile convention: with M scores and confidence level ``alpha`` the
threshold is the k-th largest score, ``k = ceil((1 - alpha) * M)``.  Every
score ``>= tau`` is selected, so ties at the threshold are kept and the
selected fraction always lies in ``[1 - alpha, 1]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from eslm.numcore import masked_mean_value

STD_EPS = 1e-8


class ScoreKind(str, enum.Enum):
    ENTROPY = "entropy"
    LOSS = "loss"


@dataclass
class TokenScores:
    """Flattened per-token risk scores of one micro-batch."""

    values: np.ndarray
    kind: ScoreKind = ScoreKind.LOSS
    standardized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values).reshape(-1)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float64)
        self.kind = ScoreKind(self.kind)
        if self.values.size < 1:
            raise ValueError("TokenScores needs at least one score")
        if not np.isfinite(self.values).all():
            raise ValueError("TokenScores contains non-finite values")

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass
class SelectionMask:
    selected: np.ndarray
    threshold: float
    alpha: float
    selected_count: int = field(init=False)

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=bool).reshape(-1)
        self.selected_count = int(np.count_nonzero(self.selected))

    @property
    def fraction(self) -> float:
        return self.selected_count / self.selected.size


@dataclass
class RiskConfig:
    alpha: float = 0.1
    kind: ScoreKind = ScoreKind.LOSS
    standardize: bool = True
    per_domain: bool = False

    def __post_init__(self):
        self.kind = ScoreKind(self.kind)
        check_alpha(self.alpha)


def check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return float(alpha)


def _as_scores(scores) -> TokenScores:
    return scores if isinstance(scores, TokenScores) else TokenScores(scores)


def tail_count(m: int, alpha: float) -> int:
    """``ceil((1 - alpha) * m)``, robust to binary rounding of ``alpha``."""
    check_alpha(alpha)
    return max(1, math.ceil(round((1.0 - alpha) * m, 9)))


def standardize_scores(scores, groups=None) -> TokenScores:
    """``(s - mean) / (std + 1e-8)`` over the batch, or within each group label.

    With fewer than two scores the input is returned unchanged (``standardized``
    stays False).
    """
    s = _as_scores(scores)
    if len(s) < 2:
        return s
    v = s.values.astype(np.float64)
    if groups is None:
        out = (v - v.mean()) / (v.std() + STD_EPS)
    else:
        groups = np.asarray(groups).reshape(-1)
        if groups.shape != v.shape:
            raise ValueError(f"groups shape {groups.shape} does not match scores {v.shape}")
        out = np.empty_like(v)
        for g in np.unique(groups):
            idx = groups == g
            out[idx] = (v[idx] - v[idx].mean()) / (v[idx].std() + STD_EPS)
    return replace(s, values=out, standardized=True)


def var_threshold(scores, alpha: float) -> float:
    """Empirical VaR: the ``ceil((1 - alpha) * M)``-th largest score."""
    v = _as_scores(scores).values
    k = tail_count(v.size, alpha)
    return float(np.sort(v)[v.size - k])


def select_mask(scores, tau: float, alpha: float = float("nan")) -> SelectionMask:
    """Select every score ``>= tau``."""
    v = _as_scores(scores).values
    selected = v >= tau
    assert selected.any(), "threshold selects no token"
    return SelectionMask(selected, float(tau), alpha)


def select(scores, alpha: float) -> SelectionMask:
    """Threshold at VaR_alpha and build the mask in one call."""
    return select_mask(scores, var_threshold(scores, alpha), alpha)


def cvar(scores, alpha: float) -> float:
    """Mean of the scores selected at VaR_alpha (tail mean)."""
    v = _as_scores(scores).values
    mask = v >= var_threshold(v, alpha)
    return float(masked_mean_value(v, mask))


def random_mask(m: int, count: int, rng: np.random.Generator) -> SelectionMask:
    """Uniformly random subset of exactly ``count`` of ``m`` positions."""
    if not 1 <= count <= m:
        raise ValueError(f"count must be in [1, {m}], got {count}")
    selected = np.zeros(m, dtype=bool)
    selected[rng.choice(m, size=count, replace=False)] = True
    return SelectionMask(selected, float("nan"), float("nan"))
