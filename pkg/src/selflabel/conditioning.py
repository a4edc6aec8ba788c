"""Gated conditioning of visual feature tokens on text and a spatial prior.

Each encoder stage mixes two streams into its token field V (shape B x N x C):

  * a semantic stream: cross-attention from V onto the instruction tokens,
  * a structural stream: the (pooled, lifted) prior map, injected tokenwise
    at shallow stages and via cross-attention at deep stages,

weighted by learnable scalars alpha / beta and modulated by a token-wise
gate sigma(W_g V).  The gate projection starts at zero, so conditioning
begins at strength 0.5 everywhere and training decides where to listen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# stages deeper than this use attention for the structural stream
TOKENWISE_STAGES = 2


@dataclass
class StageSpec:
    index: int        # 1-based stage position
    channels: int
    text_dim: int

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("stage index is 1-based")


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention; q: (B,N,d), k/v: (B,L,d)/(B,L,c)."""
    d = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(d))
    return ad.matmul(ad.softmax_rows(scores), v)


def align_prior(prior: Tensor, stage_hw: tuple[int, int]) -> Tensor:
    """Pool a (B,1,H,W) prior down to the stage grid and flatten to
    (B, h*w, 1) tokens.  The prior resolution must be divisible by the
    stage resolution."""
    _, c, H, W = prior.shape
    h, w = stage_hw
    if c != 1:
        raise ValueError("prior must have a single channel")
    if H % h or W % w or (H // h) != (W // w):
        raise ValueError(f"prior {H}x{W} not reducible to stage {h}x{w}")
    pooled = ad.avg_pool2d(prior, H // h)
    return ad.transpose(ad.reshape(pooled, (prior.shape[0], 1, h * w)))


class StageConditioner:
    """Parameters and forward pass of one stage's conditioning block."""

    def __init__(self, spec: StageSpec, rng: np.random.Generator):
        c, ct = spec.channels, spec.text_dim
        self.spec = spec

        def w(rows, cols, scale):
            return Tensor(rng.normal(0.0, scale, size=(rows, cols)), requires_grad=True)

        self.sem_wq = w(c, c, 1.0 / np.sqrt(c))
        self.sem_wk = w(ct, c, 1.0 / np.sqrt(ct))
        self.sem_wv = w(ct, c, 1.0 / np.sqrt(ct))
        self.lift_w = w(1, c, 1.0)
        self.lift_b = Tensor(np.zeros(c), requires_grad=True)
        if spec.index <= TOKENWISE_STAGES:
            self.geo_wp = w(c, c, 1.0 / np.sqrt(c))
        else:
            self.geo_wq = w(c, c, 1.0 / np.sqrt(c))
            self.geo_wk = w(c, c, 1.0 / np.sqrt(c))
            self.geo_wv = w(c, c, 1.0 / np.sqrt(c))
        # zero gate projection: conditioning starts at sigmoid(0) = 0.5
        self.gate_w = Tensor(np.zeros((c, c)), requires_grad=True)
        self.gate_b = Tensor(np.zeros(c), requires_grad=True)
        self.alpha = Tensor(np.float64(0.5), requires_grad=True)
        self.beta = Tensor(np.float64(0.5), requires_grad=True)

    def params(self):
        named = [("sem_wq", self.sem_wq), ("sem_wk", self.sem_wk),
                 ("sem_wv", self.sem_wv), ("lift_w", self.lift_w),
                 ("lift_b", self.lift_b)]
        if self.spec.index <= TOKENWISE_STAGES:
            named.append(("geo_wp", self.geo_wp))
        else:
            named += [("geo_wq", self.geo_wq), ("geo_wk", self.geo_wk),
                      ("geo_wv", self.geo_wv)]
        named += [("gate_w", self.gate_w), ("gate_b", self.gate_b),
                  ("alpha", self.alpha), ("beta", self.beta)]
        return named

    def semantic(self, v: Tensor, s: Tensor) -> Tensor:
        return cross_attention(ad.matmul(v, self.sem_wq),
                               ad.matmul(s, self.sem_wk),
                               ad.matmul(s, self.sem_wv))

    def structural(self, v: Tensor, g: Tensor) -> Tensor:
        lifted = ad.add_bias(ad.matmul(g, self.lift_w), self.lift_b)
        if self.spec.index <= TOKENWISE_STAGES:
            # token-local injection: prior token u only touches output token u
            return ad.matmul(lifted, self.geo_wp)
        return cross_attention(ad.matmul(v, self.geo_wq),
                               ad.matmul(lifted, self.geo_wk),
                               ad.matmul(lifted, self.geo_wv))

    def forward(self, v: Tensor, s: Tensor, g: Tensor | None,
                gated: bool = True) -> Tensor:
        """v: (B,N,C) visual tokens, s: (B,L,Ct) text tokens, g: (B,N,1)
        stage-aligned prior tokens.  With gated=False the block degrades to
        plain additive cross-attention on the text (no prior, no gate)."""
        sem = self.semantic(v, s)
        if not gated:
            return ad.add(v, sem)
        if g is None:
            raise ValueError("gated conditioning needs prior tokens")
        mixed = ad.add(ad.mul(self.alpha, sem),
                       ad.mul(self.beta, self.structural(v, g)))
        gate = ad.sigmoid(ad.add_bias(ad.matmul(v, self.gate_w), self.gate_b))
        return ad.add(v, ad.mul(gate, mixed))
