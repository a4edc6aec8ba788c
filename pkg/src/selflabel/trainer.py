"""Closed training loop: supervised warm-up, self-evolving prior fusion,
conditioned weak/strong forwards, adaptive pseudo-label selection, and the
supervised / fixed-threshold baselines.

One optimization step consumes one labeled and one unlabeled mini-batch
(1:1).  Each unlabeled sample follows the weak-to-strong scheme: the weak
view is predicted without gradients and un-flipped back to the original
frame, where it is fused with the sample's raw external prior,
partitioned into FG/BG/IGNORE, and scored; the strong view (photometric
ops on top of the weak view) is then supervised on the selected pixels
after mapping the partition into the weak frame.  Only the strong
forward is conditioned on the freshly calibrated prior; the calibrated
map therefore improves from visit to visit as the weak predictions
improve.

Two traps shape this wiring.  Conditioning the weak (pseudo-label)
forward on any prior-derived map lets prediction and prior confirm each
other: the weak pass runs under eval conditions (neutral prior) so the
agreement terms in the fusion compare two independent opinions.  And
because the strong pass is conditioned on the very map that defines its
targets, the consistency loss is satisfiable by copying the prior
channel; the per-sample prior dropout in RunConfig breaks that shortcut.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import reduce
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agent import (QualityMetrics, RpleConfig, ThresholdAction,
                    ThresholdAgent, build_state, clip_reward, consistency,
                    coverage, instructional_gain, separability)
from .autodiff import GradTape
from .calibration import FusionCoefficients, calibrate
from .checkpoint import load_weights, save_weights
from .losses import (LossConfig, fixmatch_select, total_loss, unsup_loss,
                     weighted_bce)
from .metrics import pseudo_quality
from .optim import MomentumSGD, zero_grads
from .probmap import (BG, FG, IGNORE, PixelPartition, iou, partition_pixels)
from .segnet import NetConfig, SegNet, unit_capped
from .simworld import Corpus, strong_augment, weak_augment

VARIANTS = ("supervised", "fixmatch_fixed", "l2l_full", "l2l_no_sesm",
            "l2l_no_rple", "l2l_no_spm", "fixed_tau_sweep")

_CONDITIONED = {"l2l_full", "l2l_no_rple", "l2l_no_spm", "fixed_tau_sweep"}
_WITH_SPM = {"l2l_full", "l2l_no_sesm", "l2l_no_rple", "fixed_tau_sweep"}
_WITH_RPLE = {"l2l_full", "l2l_no_sesm", "l2l_no_spm"}

METRIC_COLUMNS = ("epoch", "split", "mean_iou", "sup_loss", "unsup_loss",
                  "tau_fg_mean", "tau_bg_mean", "sel_acc", "sel_cov",
                  "prior_iou_raw", "prior_iou_cal", "reward_mean")
STEP_COLUMNS = ("step", "tau_fg", "tau_bg", "M", "K", "C", "P_stab", "R",
                "critic_loss")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; the message carries the state
    needed to reproduce the blow-up."""


@dataclass
class RunConfig:
    variant: str = "l2l_full"
    epochs: int = 14
    batch_size: int = 8
    base_lr: float = 0.12
    momentum: float = 0.9
    poly_power: float = 0.9
    # supervised-only epochs before the consistency loss switches on; the
    # network must clear roughly 0.5 IoU on weak views first or the early
    # pseudo-labels drag it into a self-confirming low-quality fixed point
    warmup_epochs: int = 5
    seed: int = 22
    band_radius: int = 2
    fixed_tau_fg: float = 0.70
    fixed_tau_bg: float = 0.20
    sweep_taus: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    # reward baseline: False compares this visit's partition against the
    # previous action on the same maps (counterfactual); True compares
    # against the metrics stored at the sample's previous visit
    sequential_gain: bool = False
    # probability that a strong-pass sample is conditioned on the neutral
    # prior instead of the calibrated one; without this the network can
    # satisfy the consistency loss by copying the prior channel (it is the
    # pseudo target) and never learns to predict from the image
    prior_dropout: float = 0.5
    eval_batch: int = 16
    net: NetConfig = field(default_factory=NetConfig)
    fusion: FusionCoefficients = field(default_factory=FusionCoefficients)
    rple: RpleConfig = field(default_factory=RpleConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.base_lr <= 0 or not np.isfinite(self.base_lr):
            raise ValueError("base_lr must be positive and finite")
        if self.band_radius < 0:
            raise ValueError("band_radius must be >= 0")
        if not 0.0 <= self.fixed_tau_bg <= self.fixed_tau_fg <= 1.0:
            raise ValueError("need 0 <= fixed_tau_bg <= fixed_tau_fg <= 1")
        if not all(0.0 <= t <= 1.0 for t in self.sweep_taus):
            raise ValueError("sweep_taus must lie in [0,1]")
        if not 0.0 <= self.prior_dropout <= 1.0:
            raise ValueError("prior_dropout must lie in [0,1]")

    @property
    def semi_supervised(self) -> bool:
        return self.variant != "supervised"

    @property
    def conditioned(self) -> bool:
        return self.variant in _CONDITIONED

    @property
    def with_spm(self) -> bool:
        return self.variant in _WITH_SPM

    @property
    def with_rple(self) -> bool:
        return self.variant in _WITH_RPLE


def derived_seed(*parts) -> int:
    """Stable 64-bit stream seed from a tuple of labels (hash-based, so
    adding epochs or samples never shifts other streams)."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8],
                          "little")


# ---------------------------------------------------------------------------
# log rows and CSV plumbing


@dataclass(frozen=True)
class MetricRow:
    epoch: int
    split: str
    mean_iou: float
    sup_loss: float
    unsup_loss: float
    tau_fg_mean: float
    tau_bg_mean: float
    sel_acc: float
    sel_cov: float
    prior_iou_raw: float
    prior_iou_cal: float
    reward_mean: float

    def csv_cells(self) -> list[str]:
        cells = [str(self.epoch), self.split]
        cells += [_fmt(getattr(self, name)) for name in METRIC_COLUMNS[2:]]
        return cells


@dataclass(frozen=True)
class StepRow:
    step: int
    tau_fg: float
    tau_bg: float
    m_sep: float
    k_cons: float
    c_cov: float
    p_stab: float
    reward: float
    critic_loss: float

    def csv_cells(self) -> list[str]:
        vals = (self.tau_fg, self.tau_bg, self.m_sep, self.k_cons,
                self.c_cov, self.p_stab, self.reward, self.critic_loss)
        return [str(self.step)] + [_fmt(v) for v in vals]


def _fmt(x) -> str:
    return format(float(x), ".10g")


def _write_csv(path, header, rows, config_hash: str, timestamp: str | None):
    stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash}\n")
        f.write(f"# created={stamp}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row.csv_cells()) + "\n")


def write_metrics_csv(path, rows, config_hash: str = "-", timestamp=None):
    _write_csv(path, METRIC_COLUMNS, rows, config_hash, timestamp)


def write_steps_csv(path, rows, config_hash: str = "-", timestamp=None):
    _write_csv(path, STEP_COLUMNS, rows, config_hash, timestamp)


def csv_body(path) -> str:
    """Everything except '#' comment lines — the part of a log that must be
    byte-identical across reruns of the same config and seed."""
    with open(path, "r", encoding="utf-8") as f:
        return "".join(line for line in f if not line.startswith("#"))


def quality_history(rows: list[MetricRow]) -> list[dict]:
    """Per-epoch pseudo-label quality: prior IoU before and after fusion,
    plus accuracy/coverage of the selected supervision pixels."""
    return [{"epoch": r.epoch, "prior_iou_raw": r.prior_iou_raw,
             "prior_iou_cal": r.prior_iou_cal, "sel_acc": r.sel_acc,
             "sel_cov": r.sel_cov} for r in rows]


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    mean_iou: float
    per_sample: tuple[float, ...]


def evaluate(net, samples, conditioned: bool = True,
             batch_size: int = 16) -> EvalResult:
    """Mean IoU of thresholded predictions (p >= 0.5) against ground truth.

    No augmentation, and the prior stream stays neutral, so the score
    reflects the network alone.
    """
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    scores = []
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo:lo + batch_size]
        imgs, toks = _stack_views(batch)
        probs, _ = net.forward(imgs, toks, prior=None, conditioned=conditioned)
        pred = (probs.data >= 0.5).astype(np.float64)
        scores += [iou(pred[j], s.gt_mask.values) for j, s in enumerate(batch)]
    return EvalResult(mean_iou=float(np.mean(scores)), per_sample=tuple(scores))


def load_model(path, net_cfg: NetConfig) -> SegNet:
    """Restore a segmentation network from a weight checkpoint."""
    net = SegNet(net_cfg, seed=0)
    net.load_state(load_weights(path))
    return net


# ---------------------------------------------------------------------------
# frame mapping and partition construction


def _swap_frame(grid: np.ndarray, record) -> np.ndarray:
    """Mirror a (H, W) or (H, W, C) grid between the original and weak
    frames; flips are involutions, so one transform serves both ways."""
    return grid[:, ::-1].copy() if record.flipped else grid


def _swap_partition(part: PixelPartition, record) -> PixelPartition:
    if not record.flipped:
        return part
    return PixelPartition(labels=part.labels[:, ::-1].copy(),
                          tau_fg=part.tau_fg, tau_bg=part.tau_bg,
                          band_radius=part.band_radius)


def fixmatch_partition(pw: np.ndarray, cfg: LossConfig) -> PixelPartition:
    """Fixed-threshold selection: pseudo-labels from the binarized weak
    prediction, restricted to pixels whose probability reaches fixed_tau.

    The selection rule is one-sided, so at tau >= 0.5 confident background
    (low probability) is never selected.
    """
    pseudo, selected = fixmatch_select(pw, cfg.fixed_tau)
    labels = np.full(pw.shape, IGNORE, dtype=np.uint8)
    labels[selected & (pseudo == 1)] = FG
    labels[selected & (pseudo == 0)] = BG
    return PixelPartition(labels=labels, tau_fg=cfg.fixed_tau,
                          tau_bg=cfg.fixed_tau, band_radius=0)


def _stack_views(views):
    imgs = np.stack([v.image2d for v in views])
    toks = np.array([v.instruction for v in views], dtype=np.int64)
    return imgs, toks


def _index_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]


def _cycled_batches(n: int, batch_size: int, rng):
    """Endless stream of shuffled index batches, reshuffled every pass."""
    while True:
        yield from _index_batches(n, batch_size, rng)


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else float("nan")


class _EpochStats:
    def __init__(self):
        self.sup = []
        self.unsup = []
        self.tau_fg = []
        self.tau_bg = []
        self.rewards = []

    def to_row(self, epoch: int, mean_iou: float, prior_iou_raw: float,
               quality: tuple[float, float, float]) -> MetricRow:
        sel_acc, sel_cov, cal_iou = quality
        return MetricRow(
            epoch=epoch, split="test", mean_iou=mean_iou,
            sup_loss=_mean(self.sup),
            unsup_loss=float(np.mean(self.unsup)) if self.unsup else 0.0,
            tau_fg_mean=_mean(self.tau_fg), tau_bg_mean=_mean(self.tau_bg),
            sel_acc=sel_acc, sel_cov=sel_cov,
            prior_iou_raw=prior_iou_raw, prior_iou_cal=cal_iou,
            reward_mean=_mean(self.rewards))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    cfg: RunConfig
    metric_rows: list[MetricRow]
    step_rows: list[StepRow]
    net: SegNet
    agent: ThresholdAgent | None
    final: EvalResult


class _Loop:
    def __init__(self, cfg: RunConfig, corpus: Corpus):
        if not corpus.labeled:
            raise ValueError("training requires a non-empty labeled split")
        if not corpus.test:
            raise ValueError("training requires a non-empty test split")
        if cfg.semi_supervised and not corpus.unlabeled:
            raise ValueError(f"variant {cfg.variant!r} requires unlabeled samples")
        self.cfg = cfg
        self.corpus = corpus
        self.net = SegNet(cfg.net, seed=derived_seed(cfg.seed, "net"))
        self.agent = (ThresholdAgent(cfg.rple, seed=derived_seed(cfg.seed, "agent"))
                      if cfg.with_rple else None)
        per_epoch = (math.ceil(len(corpus.unlabeled) / cfg.batch_size)
                     if cfg.semi_supervised
                     else math.ceil(len(corpus.labeled) / cfg.batch_size))
        self.opt = MomentumSGD(self.net.trainable(), cfg.base_lr, cfg.momentum,
                               total_steps=cfg.epochs * per_epoch,
                               power=cfg.poly_power)
        self.raw_prior = {s.sample_id: corpus.priors[s.sample_id].values
                          for s in corpus.unlabeled} if cfg.semi_supervised else {}
        self.last_action = {s.sample_id: ThresholdAction(cfg.fixed_tau_fg,
                                                         cfg.fixed_tau_bg)
                            for s in corpus.unlabeled}
        self.last_quality: dict[str, QualityMetrics] = {}
        self.prior_iou_raw = (_mean([iou(self.raw_prior[s.sample_id],
                                         s.gt_mask.values)
                                     for s in corpus.unlabeled])
                              if cfg.semi_supervised else float("nan"))
        self.metric_rows: list[MetricRow] = []
        self.step_rows: list[StepRow] = []
        self.decisions = 0
        self.ep = _EpochStats()

    def run(self, verbose: bool = False) -> TrainResult:
        cfg = self.cfg
        last_eval = None
        for epoch in range(1, cfg.epochs + 1):
            self.ep = _EpochStats()
            order_rng = np.random.default_rng(derived_seed(cfg.seed, epoch, "order"))
            if cfg.semi_supervised:
                warm = epoch <= cfg.warmup_epochs
                lab_rng = np.random.default_rng(
                    derived_seed(cfg.seed, epoch, "labeled"))
                lab_iter = _cycled_batches(len(self.corpus.labeled),
                                           cfg.batch_size, lab_rng)
                for chunk in _index_batches(len(self.corpus.unlabeled),
                                            cfg.batch_size, order_rng):
                    u_batch = [self.corpus.unlabeled[i] for i in chunk]
                    l_batch = [self.corpus.labeled[i] for i in next(lab_iter)]
                    self._semi_step(epoch, warm, u_batch, l_batch)
            else:
                for chunk in _index_batches(len(self.corpus.labeled),
                                            cfg.batch_size, order_rng):
                    self._sup_step(epoch, [self.corpus.labeled[i] for i in chunk])
            last_eval = evaluate(self.net, self.corpus.test,
                                 conditioned=cfg.conditioned,
                                 batch_size=cfg.eval_batch)
            row = self.ep.to_row(epoch, last_eval.mean_iou, self.prior_iou_raw,
                                 self._quality_snapshot())
            self.metric_rows.append(row)
            if verbose:
                print(f"[{cfg.variant} seed={cfg.seed}] epoch {epoch}/{cfg.epochs}"
                      f" iou={row.mean_iou:.4f} sup={row.sup_loss:.4f}"
                      f" unsup={row.unsup_loss:.4f} tau_fg={row.tau_fg_mean:.3f}"
                      f" sel_acc={row.sel_acc:.4f} sel_cov={row.sel_cov:.4f}"
                      f" cal={row.prior_iou_cal:.4f}")
        return TrainResult(cfg=cfg, metric_rows=self.metric_rows,
                           step_rows=self.step_rows, net=self.net,
                           agent=self.agent, final=last_eval)

    def _quality_snapshot(self) -> tuple[float, float, float]:
        """Measure the pseudo-labeler on the unlabeled pool as it stands.

        The quality columns describe the pseudo-labeler itself, not the
        batches a particular epoch happened to train on, so they are read
        out once per epoch from the trained-so-far model under the same
        conditions the next epoch's targets would be built: a neutral-prior
        forward in the original frame, calibration against the stored
        external prior, and a greedy (noise-free) threshold decision.  The
        pass is a pure readout; it draws no random numbers and leaves the
        agent's replay state untouched.
        """
        cfg = self.cfg
        if not cfg.semi_supervised:
            nan = float("nan")
            return nan, nan, nan
        accs, covs, cals = [], [], []
        samples = self.corpus.unlabeled
        for lo in range(0, len(samples), cfg.eval_batch):
            batch = samples[lo:lo + cfg.eval_batch]
            imgs, toks = _stack_views(batch)
            probs, _ = self.net.forward(imgs, toks, prior=None,
                                        conditioned=cfg.conditioned)
            for j, s in enumerate(batch):
                pw = probs.data[j]
                if cfg.with_spm:
                    fused = calibrate(pw, self.raw_prior[s.sample_id],
                                      cfg.fusion).values
                else:
                    fused = pw
                part = self._greedy_partition(s.sample_id, fused, pw)
                q = pseudo_quality(part, s.gt_mask)
                accs.append(q.selected_accuracy)
                covs.append(q.selected_coverage)
                cals.append(iou(fused, s.gt_mask.values))
        return _mean(accs), _mean(covs), _mean(cals)

    def _greedy_partition(self, sid, fused, pw) -> PixelPartition:
        cfg = self.cfg
        if cfg.variant == "fixmatch_fixed":
            return fixmatch_partition(fused, cfg.loss)
        if not cfg.with_rple:
            return partition_pixels(fused, cfg.fixed_tau_fg, cfg.fixed_tau_bg,
                                    cfg.band_radius)
        prev_a = self.last_action[sid]
        part_prev = partition_pixels(fused, prev_a.tau_fg, prev_a.tau_bg,
                                     cfg.band_radius)
        action = self.agent.act(build_state(fused, part_prev, pw),
                                explore=False)
        return partition_pixels(fused, action.tau_fg, action.tau_bg,
                                cfg.band_radius)

    # -- one 1:1 step of a semi-supervised variant --------------------------

    def _semi_step(self, epoch, warm, u_batch, l_batch):
        cfg = self.cfg
        pairs = [weak_augment(s, derived_seed(cfg.seed, epoch, s.sample_id, "weak"))
                 for s in u_batch]
        weak_views = [p[0] for p in pairs]
        records = [p[1] for p in pairs]
        imgs, toks = _stack_views(weak_views)
        # the pseudo-label pass runs under eval conditions (neutral prior):
        # conditioning it on the raw prior would bias the weak prediction
        # toward the prior's own failure cases and mask them from the
        # agreement-gated fusion
        wprobs, wfeats = self.net.forward(imgs, toks, prior=None,
                                          conditioned=cfg.conditioned)
        capped = unit_capped(wfeats.data)  # (B, H, W, C)

        fused_maps, parts, pending = [], [], []
        for j, s in enumerate(u_batch):
            rec = records[j]
            pw = _swap_frame(wprobs.data[j], rec)  # original frame from here on
            feats = np.transpose(_swap_frame(capped[j], rec), (2, 0, 1))
            if cfg.with_spm:
                fused = calibrate(pw, self.raw_prior[s.sample_id],
                                  cfg.fusion).values
            else:
                fused = pw.copy()
            part, applied = self._choose_partition(s.sample_id, fused, pw,
                                                   feats, warm, pending)
            self.ep.tau_fg.append(applied[0])
            self.ep.tau_bg.append(applied[1])
            fused_maps.append(fused)
            parts.append(part)

        zero_grads([t for _, t in self.net.params()])
        with GradTape() as tape:
            l_views = [weak_augment(s, derived_seed(cfg.seed, epoch,
                                                    s.sample_id, "weak"))[0]
                       for s in l_batch]
            l_imgs, l_toks = _stack_views(l_views)
            l_gt = np.stack([v.gt_mask.values for v in l_views])
            l_probs, _ = self.net.forward(l_imgs, l_toks, prior=None,
                                          conditioned=cfg.conditioned)
            sup = weighted_bce(l_probs, l_gt, cfg=cfg.loss)
            unsup_val = 0.0
            if warm:
                total = sup * cfg.loss.lambda_l
            else:
                strong_views = [strong_augment(w, derived_seed(cfg.seed, epoch,
                                                               w.sample_id,
                                                               "strong"))
                                for w in weak_views]
                s_imgs, s_toks = _stack_views(strong_views)
                s_prior = None
                if cfg.conditioned:
                    # calibrated prior when the SPM is on, otherwise the raw
                    # external prior (conditioning without calibration);
                    # dropped to neutral per sample so the consistency loss
                    # cannot be satisfied by copying the prior channel
                    cond_maps = (fused_maps if cfg.with_spm else
                                 [self.raw_prior[s.sample_id] for s in u_batch])
                    neutral = np.full_like(cond_maps[0], 0.5)
                    s_prior = np.stack([
                        neutral if self._prior_dropped(epoch, s.sample_id)
                        else _swap_frame(f, r)
                        for f, r, s in zip(cond_maps, records, u_batch)])
                s_probs, _ = self.net.forward(s_imgs, s_toks, prior=s_prior,
                                              conditioned=cfg.conditioned)
                terms = [unsup_loss(ad.select_batch(s_probs, j),
                                    _swap_frame(fused_maps[j], records[j]),
                                    _swap_partition(parts[j], records[j]),
                                    cfg.loss)
                         for j in range(len(u_batch))]
                unsup = reduce(ad.add, terms) * (1.0 / len(terms))
                unsup_val = float(unsup.data)
                total = total_loss(sup, unsup, cfg.loss)
        self._check_finite(total, float(sup.data), unsup_val, epoch)
        tape.backward(total)
        self.opt.step()
        self.ep.sup.append(float(sup.data))
        if not warm:
            self.ep.unsup.append(unsup_val)

        # the agent trains through the warm-up as well: the weak pass, fusion
        # and partition all run there, so its thresholds are already near
        # their equilibrium when the unsupervised loss switches on, and the
        # first pseudo-label epoch starts from a small, clean selected set
        if self.agent is not None:
            info = self.agent.update()
            closs = float(info.get("critic_loss", float("nan")))
            for cells in pending:
                self.step_rows.append(StepRow(*cells, critic_loss=closs))

    def _prior_dropped(self, epoch: int, sid: str) -> bool:
        if self.cfg.prior_dropout <= 0.0:
            return False
        rng = np.random.default_rng(derived_seed(self.cfg.seed, epoch, sid,
                                                 "prior_dropout"))
        return bool(rng.uniform() < self.cfg.prior_dropout)

    def _choose_partition(self, sid, fused, pw, feats, warm, pending):
        """Partition the fused map and, for agent variants, push one replay
        transition; returns (partition, applied thresholds)."""
        cfg = self.cfg
        if cfg.variant == "fixmatch_fixed":
            part = fixmatch_partition(fused, cfg.loss)
            return part, (cfg.loss.fixed_tau, cfg.loss.fixed_tau)
        if not cfg.with_rple:
            part = partition_pixels(fused, cfg.fixed_tau_fg, cfg.fixed_tau_bg,
                                    cfg.band_radius)
            return part, (cfg.fixed_tau_fg, cfg.fixed_tau_bg)

        prev_a = self.last_action[sid]
        part_prev = partition_pixels(fused, prev_a.tau_fg, prev_a.tau_bg,
                                     cfg.band_radius)
        state = build_state(fused, part_prev, pw)
        action = self.agent.act(state, explore=True)
        part = partition_pixels(fused, action.tau_fg, action.tau_bg,
                                cfg.band_radius)
        cur_q = QualityMetrics(
            m_sep=separability(feats, part, cfg.rple.beta_temp),
            k_cons=consistency(pw, fused, part),
            c_cov=coverage(part))
        if cfg.sequential_gain and sid in self.last_quality:
            prev_q = self.last_quality[sid]
        else:
            prev_q = QualityMetrics(
                m_sep=separability(feats, part_prev, cfg.rple.beta_temp),
                k_cons=consistency(pw, fused, part_prev),
                c_cov=coverage(part_prev))
        gain = instructional_gain(prev_q, cur_q, prev_a, action, cfg.rple)
        reward = clip_reward(gain, cfg.rple.delta)
        self.agent.record(state, action, reward, build_state(fused, part, pw))
        self.last_action[sid] = action
        self.last_quality[sid] = cur_q
        p_stab = cfg.rple.w_stab * (abs(action.tau_fg - prev_a.tau_fg)
                                    + abs(action.tau_bg - prev_a.tau_bg))
        pending.append((self.decisions, action.tau_fg, action.tau_bg,
                        cur_q.m_sep, cur_q.k_cons, cur_q.c_cov, p_stab, reward))
        self.decisions += 1
        self.ep.rewards.append(reward)
        return part, (action.tau_fg, action.tau_bg)

    # -- one step of the supervised baseline --------------------------------

    def _sup_step(self, epoch, l_batch):
        cfg = self.cfg
        views = [weak_augment(s, derived_seed(cfg.seed, epoch, s.sample_id,
                                              "weak"))[0]
                 for s in l_batch]
        imgs, toks = _stack_views(views)
        gt = np.stack([v.gt_mask.values for v in views])
        zero_grads([t for _, t in self.net.params()])
        with GradTape() as tape:
            probs, _ = self.net.forward(imgs, toks, prior=None,
                                        conditioned=cfg.conditioned)
            sup = weighted_bce(probs, gt, cfg=cfg.loss)
            total = sup * cfg.loss.lambda_l
        self._check_finite(total, float(sup.data), 0.0, epoch)
        tape.backward(total)
        self.opt.step()
        self.ep.sup.append(float(sup.data))

    def _check_finite(self, total, sup_val, unsup_val, epoch):
        t = float(total.data)
        if np.isfinite(t):
            return
        raise TrainingDiverged(
            f"non-finite loss at epoch {epoch}, step {self.opt.step_count}: "
            f"total={t} sup={sup_val} unsup={unsup_val} "
            f"lr={self.opt.current_lr():.6g} variant={self.cfg.variant} "
            f"seed={self.cfg.seed}")


def train(cfg: RunConfig, corpus: Corpus, out_dir=None, config_hash: str = "-",
          verbose: bool = False) -> TrainResult:
    """Run one training configuration over a corpus and return its artifacts.

    When ``out_dir`` is given, writes metrics.csv, rple_steps.csv,
    model.l2lw, and (for agent variants) agent.l2lw into it.
    """
    result = _Loop(cfg, corpus).run(verbose=verbose)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", result.metric_rows, config_hash)
        write_steps_csv(out / "rple_steps.csv", result.step_rows, config_hash)
        save_weights(out / "model.l2lw", result.net.state_arrays())
        if result.agent is not None:
            save_weights(out / "agent.l2lw", result.agent.state_arrays())
    return result
