"""Calibrating an external localization prior against the model's own
weak-view prediction.

Both maps are scored for per-pixel certainty (2p - 1)^2 and global
agreement; a per-pixel weight lambda then blends the two maps in logit
space — lambda multiplies the prior's logit and grows with the prior's
certainty, shrinks with the prediction's certainty, and gets a bonus
when the two maps agree overall.  The fused map always lies between its
(clamped) inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .probmap import ProbMap, _values


@dataclass
class FusionCoefficients:
    """Weights of the certainty/agreement terms in the fusion weight."""

    lambda0: float = 0.25    # base weight of the prior
    kappa_p: float = 0.40    # reward prior certainty
    kappa_w: float = 0.25    # penalize prediction certainty
    kappa_a: float = 0.20    # agreement bonus
    epsilon: float = 1e-6    # logit clamp

    def __post_init__(self):
        for name in ("lambda0", "kappa_p", "kappa_w", "kappa_a", "epsilon"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not (0.0 < self.epsilon < 0.5):
            raise ValueError("epsilon must lie in (0, 0.5)")


def certainty_map(p) -> np.ndarray:
    """Per-pixel certainty (2p - 1)^2: 0 at p=0.5, 1 at p in {0, 1}."""
    v = _values(p)
    return (2.0 * v - 1.0) ** 2


def agreement(a, b) -> float:
    """Mean per-pixel agreement 1 - |a - b|, in [0, 1]; 1 iff identical."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ValueError(f"agreement: shapes differ {av.shape} vs {bv.shape}")
    return float(np.mean(1.0 - np.abs(av - bv)))


def fusion_weights(pw, pd, coeffs: FusionCoefficients) -> np.ndarray:
    """Per-pixel weight of the prior's logit in the blend.

    lambda(u) = clamp_0^1(lambda0 + kappa_p * C(pd(u))
                - kappa_w * C(pw(u)) + kappa_a * (W - 0.5))
    with W the global agreement between prediction and prior.
    """
    pwv, pdv = _values(pw), _values(pd)
    w_term = coeffs.kappa_a * (agreement(pwv, pdv) - 0.5)
    lam = (coeffs.lambda0 + coeffs.kappa_p * certainty_map(pdv)
           - coeffs.kappa_w * certainty_map(pwv) + w_term)
    return np.clip(lam, 0.0, 1.0)


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def fuse_logits(pw, pd, lam, epsilon: float) -> np.ndarray:
    """sigma(lam * logit(pd) + (1 - lam) * logit(pw)), inputs clamped to
    [epsilon, 1 - epsilon] first."""
    pwv = np.clip(_values(pw), epsilon, 1.0 - epsilon)
    pdv = np.clip(_values(pd), epsilon, 1.0 - epsilon)
    lam = np.asarray(lam, dtype=np.float64)
    return expit(lam * _logit(pdv) + (1.0 - lam) * _logit(pwv))


def calibrate(pw, pd, coeffs: FusionCoefficients | None = None) -> ProbMap:
    """Fuse weak prediction and prior into a calibrated map, strictly inside
    (0, 1)."""
    coeffs = coeffs or FusionCoefficients()
    lam = fusion_weights(pw, pd, coeffs)
    return ProbMap(fuse_logits(pw, pd, lam, coeffs.epsilon))
