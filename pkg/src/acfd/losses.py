"""Split-weighted detection losses with margin-shifted classification.

Matched (step-1) and compensated (step-2) anchors are pooled separately:
each pool is averaged over its own count and the compensated pool is scaled
by a lambda coefficient, so a handful of far-away compensated anchors cannot
dominate. Positive classification probabilities are shifted down by a hard
margin before the focal term, which demands a wider score gap between faces
and background. Analytic gradients are provided for finite-difference
verification.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import LABEL_COMPENSATED, LABEL_MATCHED, LABEL_NEGATIVE, MatchResult


@dataclass(frozen=True)
class LossConfig:
    lambda_reg: float = 0.7
    lambda_cls: float = 0.7
    margin: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    prob_clamp: float = 1e-7  # floor/ceiling applied before any log


@dataclass
class LossBreakdown:
    reg_main: float
    reg_comp: float
    cls_main: float
    cls_comp: float
    n1: int
    n2: int
    lambda_reg: float
    lambda_cls: float

    @property
    def total(self) -> float:
        return (self.reg_main + self.lambda_reg * self.reg_comp
                + self.cls_main + self.lambda_cls * self.cls_comp)


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Per-box smooth-L1 summed over the trailing component axis."""
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    per = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return per.sum(axis=-1)


def smooth_l1_grad(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


def margin_transform(p, is_positive, margin: float, clamp: float = 1e-7) -> np.ndarray:
    """Shift positive predictions down by the margin, clamp into (0,1)."""
    p = np.asarray(p, dtype=np.float64)
    shifted = np.where(is_positive, p - margin, p)
    return np.clip(shifted, clamp, 1.0 - clamp)


def focal(p_m, is_positive, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Binary focal term on already margin-shifted, clamped probabilities."""
    p_m = np.asarray(p_m, dtype=np.float64)
    pos = -alpha * (1.0 - p_m) ** gamma * np.log(p_m)
    neg = -(1.0 - alpha) * p_m ** gamma * np.log(1.0 - p_m)
    return np.where(is_positive, pos, neg)


def focal_grad(p_m, is_positive, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """d focal / d p_m on the clamped interior."""
    q = np.asarray(p_m, dtype=np.float64)
    dpos = alpha * gamma * (1.0 - q) ** (gamma - 1.0) * np.log(q) \
        - alpha * (1.0 - q) ** gamma / q
    dneg = -(1.0 - alpha) * (gamma * q ** (gamma - 1.0) * np.log(1.0 - q)
                             - q ** gamma / (1.0 - q))
    return np.where(is_positive, dpos, dneg)


def _pool_counts(matches: MatchResult):
    """Pool sizes floored at 1 so an empty pool contributes exactly zero
    instead of NaN."""
    return matches.labels, max(matches.n1, 1), max(matches.n2, 1)


def regression_loss(matches: MatchResult, preds: np.ndarray,
                    cfg: LossConfig) -> tuple[float, float]:
    """Returns (main, compensated) pool averages, both unweighted by lambda."""
    labels, n1, n2 = _pool_counts(matches)
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    per = smooth_l1(preds, matches.targets, cfg.smooth_l1_beta)
    main = float(per[labels == LABEL_MATCHED].sum() / n1)
    comp = float(per[labels == LABEL_COMPENSATED].sum() / n2)
    return main, comp


def classification_loss(matches: MatchResult, probs: np.ndarray,
                        cfg: LossConfig) -> tuple[float, float]:
    """Focal loss over margin-shifted probabilities.

    The main pool covers every anchor outside the compensated set (step-1
    positives and all negatives) and is still averaged over the step-1
    count; the compensated pool is averaged over its own count.
    """
    labels, n1, n2 = _pool_counts(matches)
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    is_pos = labels != LABEL_NEGATIVE
    p_m = margin_transform(probs, is_pos, cfg.margin, cfg.prob_clamp)
    per = focal(p_m, is_pos, cfg.focal_alpha, cfg.focal_gamma)
    in_comp = labels == LABEL_COMPENSATED
    main = float(per[~in_comp].sum() / n1)
    comp = float(per[in_comp].sum() / n2)
    return main, comp


def total_loss(matches: MatchResult, preds: np.ndarray, probs: np.ndarray,
               cfg: LossConfig) -> LossBreakdown:
    reg_main, reg_comp = regression_loss(matches, preds, cfg)
    cls_main, cls_comp = classification_loss(matches, probs, cfg)
    return LossBreakdown(reg_main=reg_main, reg_comp=reg_comp,
                         cls_main=cls_main, cls_comp=cls_comp,
                         n1=matches.n1, n2=matches.n2,
                         lambda_reg=cfg.lambda_reg, lambda_cls=cfg.lambda_cls)


def loss_grad(matches: MatchResult, preds: np.ndarray, probs: np.ndarray,
              cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(total)/d(preds) and d(total)/d(probs)."""
    labels, n1, n2 = _pool_counts(matches)
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)

    reg_w = np.zeros(labels.shape[0])
    reg_w[labels == 1] = 1.0 / n1
    reg_w[labels == LABEL_COMPENSATED] = cfg.lambda_reg / n2
    dpreds = smooth_l1_grad(preds, matches.targets, cfg.smooth_l1_beta) \
        * reg_w[:, None]

    is_pos = labels != LABEL_NEGATIVE
    shifted = np.where(is_pos, probs - cfg.margin, probs)
    interior = (shifted > cfg.prob_clamp) & (shifted < 1.0 - cfg.prob_clamp)
    p_m = np.clip(shifted, cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    cls_w = np.where(labels == LABEL_COMPENSATED, cfg.lambda_cls / n2, 1.0 / n1)
    dprobs = focal_grad(p_m, is_pos, cfg.focal_alpha, cfg.focal_gamma) \
        * cls_w * interior
    return dpreds, dprobs
