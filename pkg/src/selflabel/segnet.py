"""Tiny hierarchical referring segmentor.

Four conv stages over a small grayscale image (with coordinate channels so
spatial words are learnable), gated conditioning on the instruction tokens
and a spatial prior after every stage, and a light upsampling decoder that
emits a full-resolution probability map plus a per-pixel feature field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError
from .conditioning import StageConditioner, StageSpec, align_prior


@dataclass
class NetConfig:
    image_size: int = 32
    stage_channels: tuple = (8, 16, 32, 32)
    stage_pool: tuple = (2, 2, 2, 1)
    vocab_size: int = 8
    text_dim: int = 8
    feature_dim: int = 8

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_pool):
            raise ValueError("stage_channels and stage_pool must align")
        size = self.image_size
        for f in self.stage_pool:
            if size % f:
                raise ValueError(f"stage grid {size} not divisible by pool {f}")
            size //= f


def grid_to_tokens(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B, H*W, C)"""
    b, c, h, w = x.shape
    return ad.transpose(ad.reshape(x, (b, c, h * w)))


def tokens_to_grid(x: Tensor, hw: tuple[int, int]) -> Tensor:
    """(B, N, C) -> (B, C, h, w)"""
    b, n, c = x.shape
    return ad.reshape(ad.transpose(x), (b, c, *hw))


def unit_capped(features: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (B,H,W,C) with each pixel vector capped to unit norm."""
    f = np.transpose(features, (0, 2, 3, 1))
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    return f / np.maximum(norms, 1.0)


class SegNet:
    def __init__(self, cfg: NetConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(seed)

        def conv_init(cout, cin):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            return (Tensor(w, requires_grad=True),
                    Tensor(np.zeros(cout), requires_grad=True))

        self.embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.text_dim)),
                            requires_grad=True)
        # input carries the intensity plane plus x/y coordinate ramps
        self.enc = []
        cin = 3
        size = cfg.image_size
        self._stage_hw = []
        for c, f in zip(cfg.stage_channels, cfg.stage_pool):
            self.enc.append(conv_init(c, cin))
            cin = c
            size //= f
            self._stage_hw.append((size, size))
        self.stages = [
            StageConditioner(StageSpec(index=j + 1, channels=c, text_dim=cfg.text_dim), rng)
            for j, c in enumerate(cfg.stage_channels)
        ]
        total_down = int(np.prod(cfg.stage_pool))
        n_up = int(np.log2(total_down))
        if 2 ** n_up != total_down:
            raise ValueError(f"total downsampling {total_down} must be a power of two")
        # lateral skip inputs keep fine spatial detail reachable: each
        # upsample step concatenates the conditioned encoder features at the
        # target resolution (or the raw input planes at full resolution)
        skip_ch = {}
        for (h, _), c in zip(self._stage_hw, cfg.stage_channels):
            skip_ch[h] = c  # a later stage at the same resolution wins
        self.dec = []
        self._dec_lateral = []
        top = cfg.stage_channels[-1]
        cur_res = self._stage_hw[-1][0]
        cur_ch = top
        for i in range(1, n_up + 1):
            cur_res *= 2
            out_ch = cfg.feature_dim if i == n_up else max(cfg.feature_dim, top >> i)
            if cur_res in skip_ch:
                lateral, lat_ch = ("stage", cur_res), skip_ch[cur_res]
            elif cur_res == cfg.image_size:
                lateral, lat_ch = ("input", cur_res), 3
            else:
                lateral, lat_ch = (None, cur_res), 0
            self._dec_lateral.append(lateral)
            self.dec.append(conv_init(out_ch, cur_ch + lat_ch))
            cur_ch = out_ch
        self.out_channels = cur_ch
        self.head = conv_init(1, self.out_channels)

        ramp = np.linspace(-1.0, 1.0, cfg.image_size)
        self._coord_x = np.tile(ramp, (cfg.image_size, 1))
        self._coord_y = self._coord_x.T

    # -- parameters ---------------------------------------------------------

    def params(self):
        named = [("embed", self.embed)]
        for i, (w, b) in enumerate(self.enc, 1):
            named += [(f"enc{i}.w", w), (f"enc{i}.b", b)]
        for i, stage in enumerate(self.stages, 1):
            named += [(f"stage{i}.{n}", t) for n, t in stage.params()]
        for i, (w, b) in enumerate(self.dec, 1):
            named += [(f"dec{i}.w", w), (f"dec{i}.b", b)]
        named += [("head.w", self.head[0]), ("head.b", self.head[1])]
        return named

    def trainable(self):
        return [t for _, t in self.params() if t.requires_grad]

    def freeze_mix_weights(self):
        """Pin every stage's alpha/beta at their current (0.5) values."""
        for stage in self.stages:
            stage.alpha.requires_grad = False
            stage.beta.requires_grad = False

    def state_arrays(self):
        return [(n, t.data.copy()) for n, t in self.params()]

    def load_state(self, arrays: dict[str, np.ndarray]):
        mine = dict(self.params())
        if set(arrays) != set(mine):
            missing = set(mine) - set(arrays)
            extra = set(arrays) - set(mine)
            raise CheckpointError(f"checkpoint names differ: missing={sorted(missing)} "
                                  f"unexpected={sorted(extra)}")
        for name, t in mine.items():
            if arrays[name].shape != t.data.shape:
                raise CheckpointError(f"{name}: shape {arrays[name].shape} != {t.data.shape}")
            t.data = arrays[name].astype(np.float64).copy()

    # -- forward ------------------------------------------------------------

    def _prepare_images(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        b = images.shape[0]
        coords = np.stack([np.broadcast_to(self._coord_x, images.shape),
                           np.broadcast_to(self._coord_y, images.shape)], axis=1)
        x = np.concatenate([images[:, None], coords], axis=1)
        return Tensor(x)

    def _prepare_prior(self, prior, batch: int) -> Tensor:
        size = self.cfg.image_size
        if prior is None:
            grid = np.full((batch, 1, size, size), 0.5)
        else:
            grid = np.asarray(prior, dtype=np.float64)
            if grid.ndim == 2:
                grid = np.broadcast_to(grid, (batch, size, size))
            grid = grid.reshape(batch, 1, size, size)
        return Tensor(grid)

    def forward(self, images, tokens, prior=None, conditioned: bool = True):
        """images: (B,H,W) in [0,1]; tokens: (B,L) int ids; prior: (B,H,W)
        in [0,1] or None for the neutral 0.5 map.

        Returns (probs, features): (B,H,W) probabilities and the decoder's
        penultimate feature field (B,feature_dim,H,W), both as Tensors.
        """
        x = self._prepare_images(images)
        inp = x
        b = x.shape[0]
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        s = ad.gather_rows(self.embed, tokens)
        prior_grid = self._prepare_prior(prior, b)

        skips = {}
        for (w, bias), stage, f, hw in zip(self.enc, self.stages,
                                           self.cfg.stage_pool, self._stage_hw):
            x = ad.avg_pool2d(ad.relu(ad.conv2d(x, w, bias)), f)
            v = grid_to_tokens(x)
            g = align_prior(prior_grid, hw) if conditioned else None
            v = stage.forward(v, s, g, gated=conditioned)
            x = tokens_to_grid(v, hw)
            skips[hw[0]] = x

        for (w, bias), (kind, res) in zip(self.dec, self._dec_lateral):
            x = ad.upsample_nearest(x, 2)
            if kind == "stage":
                x = ad.concat_channels(x, skips[res])
            elif kind == "input":
                x = ad.concat_channels(x, inp)
            x = ad.relu(ad.conv2d(x, w, bias))
        features = x
        logits = ad.conv2d(features, self.head[0], self.head[1])
        probs = ad.sigmoid(ad.reshape(logits, (b, *logits.shape[2:])))
        return probs, features
