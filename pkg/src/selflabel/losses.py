"""Training objectives: weighted BCE, confident-foreground Dice, and the
mixed unsupervised loss applied to pseudo-labeled regions.

All losses take predictions as autodiff tensors and targets as plain
arrays (or ProbMap/BinaryMask wrappers); pseudo-targets are constants by
construction, so no gradient can flow back into the maps they were
derived from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, clamp, log, tsum
from .probmap import FG, IGNORE, PixelPartition

BCE_CLAMP = 1e-7


def _raw(x) -> np.ndarray:
    """Accept a ProbMap/BinaryMask wrapper or a bare array of any shape."""
    if hasattr(x, "values"):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class LossConfig:
    lambda_l: float = 1.0
    lambda_u: float = 1.0
    alpha_mix: float = 0.7
    w_bg: float = 0.5
    w_fg: float = 1.5
    ignore_label: int = IGNORE
    dice_eps: float = 1e-6
    fixed_tau: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ValueError(f"alpha_mix must lie in [0,1], got {self.alpha_mix}")
        for name in ("lambda_l", "lambda_u", "w_bg", "w_fg", "dice_eps"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.w_bg == 0 or self.w_fg == 0:
            raise ValueError("class weights must be positive")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_raw(x))


def weighted_bce(pred, target, ignore=None, cfg: LossConfig | None = None) -> Tensor:
    """Class-weighted binary cross-entropy, averaged over non-ignored pixels.

    ``ignore`` is a boolean mask of pixels excluded from the average; if
    every pixel is ignored the loss is 0.  Predictions are clamped to
    [1e-7, 1-1e-7] so saturated outputs stay finite.
    """
    cfg = cfg or LossConfig()
    p = _as_tensor(pred)
    y = _raw(target)
    if p.data.shape != y.shape:
        raise ShapeError(f"pred shape {p.data.shape} != target shape {y.shape}")
    if ignore is None:
        keep = np.ones_like(y, dtype=bool)
    else:
        keep = ~np.asarray(ignore, dtype=bool)
        if keep.shape != y.shape:
            raise ShapeError(f"ignore shape {keep.shape} != target shape {y.shape}")
    n = float(keep.sum())
    if n == 0:
        return Tensor(0.0)
    w = np.where(y > 0.5, cfg.w_fg, cfg.w_bg)
    coeff = w * keep  # zero out ignored pixels before the sum
    pc = clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    yt = Tensor(y)
    one = Tensor(np.ones_like(y))
    ll = yt * log(pc) + (one - yt) * log(one - pc)
    return tsum(ll * Tensor(-coeff)) * (1.0 / n)


def dice_fg(pred, pseudo, part: PixelPartition, eps: float = 1e-6) -> Tensor:
    """Dice loss restricted to the partition's confident-foreground pixels.

    Returns 0 when no pixel is confidently foreground, so degenerate
    threshold actions cannot blow up the objective.
    """
    p = _as_tensor(pred)
    y = _raw(pseudo)
    if p.data.shape != y.shape:
        raise ShapeError(f"pred shape {p.data.shape} != pseudo shape {y.shape}")
    if part.labels.shape != y.shape:
        raise ShapeError(f"partition shape {part.labels.shape} != pseudo shape {y.shape}")
    pos = (part.labels == FG).astype(np.float64)
    if pos.sum() == 0:
        return Tensor(0.0)
    mask = Tensor(pos)
    yt = Tensor(y * pos)
    inter = tsum(p * yt)
    denom = tsum(p * mask) + Tensor(float((y * pos).sum()))
    return Tensor(1.0) - (inter * 2.0 + eps) / (denom + eps)


def unsup_loss(pred_strong, fused, part: PixelPartition, cfg: LossConfig | None = None) -> Tensor:
    """Mixed BCE/Dice objective on pseudo-labeled confident regions.

    The pseudo-mask is the foreground indicator of ``part``; band pixels
    are ignored in the BCE term and absent from the Dice term.  ``fused``
    only ever enters through the (already fixed) partition, so it
    receives no gradient.
    """
    cfg = cfg or LossConfig()
    p = _as_tensor(pred_strong)
    fused_v = fused.data if isinstance(fused, Tensor) else _raw(fused)
    if p.data.shape != fused_v.shape or part.labels.shape != fused_v.shape:
        raise ShapeError("pred_strong, fused, and partition shapes must match")
    pseudo = (part.labels == FG).astype(np.float64)
    ignore = part.labels == cfg.ignore_label
    bce = weighted_bce(p, pseudo, ignore, cfg)
    if cfg.alpha_mix == 1.0:
        return bce
    dice = dice_fg(p, pseudo, part, cfg.dice_eps)
    return bce * cfg.alpha_mix + dice * (1.0 - cfg.alpha_mix)


def total_loss(sup, unsup, cfg: LossConfig | None = None) -> Tensor:
    """Weighted sum of the supervised and unsupervised branches."""
    cfg = cfg or LossConfig()
    return _as_tensor(sup) * cfg.lambda_l + _as_tensor(unsup) * cfg.lambda_u


def fixmatch_select(pw, tau: float, pseudo_threshold: float = 0.7) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-threshold pseudo-labeling: binarize the weak prediction at
    ``pseudo_threshold`` and keep pixels whose probability reaches ``tau``.

    Returns ``(pseudo_mask uint8, selected bool)``.
    """
    v = _raw(pw)
    pseudo = (v >= pseudo_threshold).astype(np.uint8)
    selected = v >= tau
    return pseudo, selected
