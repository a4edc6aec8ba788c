"""Synthetic referring-segmentation world.

Scenes are grayscale grids holding a few non-overlapping blobs; a
one-token instruction (left/right/top/bottom/big/small/bright/dark)
picks out exactly one of them.  A configurable prior generator produces
soft foreground maps in several noise regimes — faithful ramps,
jittered boundaries, confident misses on a distractor or on empty
background, and under-confident squashes — so the confidence-mismatch
situations the calibration stage targets all occur in one corpus.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, distance_transform_edt, gaussian_filter
from scipy.special import expit

from .probmap import BinaryMask, ProbMap

VOCAB = ("left", "right", "top", "bottom", "big", "small", "bright", "dark")
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
NOISE_MODES = ("faithful", "boundary_jitter", "distractor_swap", "hallucinate", "under_confident")

PRIOR_SEED_SALT = 0x5EED
RAMP_SLOPE = 1.5


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    size: int = 32
    min_blobs: int = 2
    max_blobs: int = 4
    min_half_axis: int = 3
    max_half_axis: int = 7
    intensity_lo: float = 0.35
    intensity_hi: float = 0.95
    background: float = 0.08
    pixel_noise: float = 0.02
    margin_px: float = 2.0
    area_ratio: float = 1.25
    intensity_gap: float = 0.12
    max_tries: int = 200

    def __post_init__(self):
        if self.size < 4 * self.max_half_axis:
            raise ValueError("grid too small for the configured blob sizes")
        if not 2 <= self.min_blobs <= self.max_blobs:
            raise ValueError("need at least two blobs so the reference is non-trivial")
        if not 0.0 <= self.intensity_lo < self.intensity_hi <= 1.0:
            raise ValueError("intensity range must be ordered inside [0,1]")


@dataclass(frozen=True)
class PriorNoiseConfig:
    mode: str = "faithful"
    reliability: float = 1.0
    blur_radius: float = 1.0
    swap_prob: float = 1.0
    mix_weights: tuple[float, ...] = (0.07, 0.77, 0.03, 0.03, 0.10)

    def __post_init__(self):
        if self.mode not in NOISE_MODES and self.mode != "mixed":
            raise ValueError(f"unknown noise mode {self.mode!r}")
        for name in ("reliability", "swap_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {v}")
        if len(self.mix_weights) != len(NOISE_MODES):
            raise ValueError(f"mix_weights needs {len(NOISE_MODES)} entries")
        if any(w < 0 for w in self.mix_weights) or sum(self.mix_weights) <= 0:
            raise ValueError("mix_weights must be non-negative with positive sum")


@dataclass(eq=False)
class Blob:
    kind: str  # "ellipse" | "rect"
    mask: np.ndarray  # (H, W) bool
    centroid: tuple[float, float]  # (cy, cx)
    area: int
    intensity: float


@dataclass(eq=False)
class SynthSample:
    image: np.ndarray  # (H, W, 1) in [0,1]
    instruction: tuple[int, ...]
    gt_mask: BinaryMask
    sample_id: str
    labeled: bool = False
    blobs: tuple[Blob, ...] = ()
    target_index: int = -1

    @property
    def image2d(self) -> np.ndarray:
        return self.image[:, :, 0]


@dataclass(frozen=True)
class TransformRecord:
    flipped: bool


# ---------------------------------------------------------------------------
# scene generation


def _blob_mask(kind, cy, cx, a, b, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "ellipse":
        return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0
    return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)


def _unique_winner(values, best, gap, larger_better):
    """Index of the strict winner, or -1 when the runner-up is too close."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v)
    if larger_better:
        order = order[::-1]
    lead = v[order[0]] - v[order[1]] if larger_better else v[order[1]] - v[order[0]]
    if best == "ratio":
        hi, lo = (v[order[0]], v[order[1]]) if larger_better else (v[order[1]], v[order[0]])
        return int(order[0]) if lo > 0 and hi / lo >= gap else -1
    return int(order[0]) if lead >= gap else -1


def _candidate_instructions(blobs, cfg: WorldConfig):
    cxs = [b.centroid[1] for b in blobs]
    cys = [b.centroid[0] for b in blobs]
    areas = [b.area for b in blobs]
    vals = [b.intensity for b in blobs]
    out = []
    for word, values, larger in (("left", cxs, False), ("right", cxs, True),
                                 ("top", cys, False), ("bottom", cys, True)):
        i = _unique_winner(values, "gap", cfg.margin_px, larger)
        if i >= 0:
            out.append((word, i))
    for word, larger in (("big", True), ("small", False)):
        i = _unique_winner(areas, "ratio", cfg.area_ratio, larger)
        if i >= 0:
            out.append((word, i))
    for word, larger in (("bright", True), ("dark", False)):
        i = _unique_winner(vals, "gap", cfg.intensity_gap, larger)
        if i >= 0:
            out.append((word, i))
    return out


def _place_blobs(rng, cfg: WorldConfig):
    n = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
    occupied = np.zeros((cfg.size, cfg.size), dtype=bool)
    blobs = []
    for _ in range(n):
        placed = False
        for _ in range(40):
            kind = "ellipse" if rng.uniform() < 0.6 else "rect"
            a = rng.uniform(cfg.min_half_axis, cfg.max_half_axis)
            b = rng.uniform(cfg.min_half_axis, cfg.max_half_axis)
            cy = rng.uniform(a + 1, cfg.size - 2 - a)
            cx = rng.uniform(b + 1, cfg.size - 2 - b)
            mask = _blob_mask(kind, cy, cx, a, b, cfg.size)
            if mask.sum() < 4:
                continue
            if (binary_dilation(mask) & occupied).any():
                continue
            ys, xs = np.nonzero(mask)
            blobs.append(Blob(kind=kind, mask=mask,
                              centroid=(float(ys.mean()), float(xs.mean())),
                              area=int(mask.sum()),
                              intensity=float(rng.uniform(cfg.intensity_lo, cfg.intensity_hi))))
            occupied |= mask
            placed = True
            break
        if not placed:
            return None
    return blobs


def gen_sample(seed: int, cfg: WorldConfig = WorldConfig(), sample_id: str | None = None,
               labeled: bool = False) -> SynthSample:
    """Deterministically build one scene whose instruction has a unique,
    clearly-margined referent."""
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_tries):
        blobs = _place_blobs(rng, cfg)
        if blobs is None:
            continue
        candidates = _candidate_instructions(blobs, cfg)
        if not candidates:
            continue
        word, target = candidates[int(rng.integers(len(candidates)))]
        canvas = np.full((cfg.size, cfg.size), cfg.background)
        for blob in blobs:
            canvas[blob.mask] = blob.intensity
        noise = rng.normal(0.0, 1.0, size=canvas.shape) * cfg.pixel_noise
        image = np.clip(canvas + noise, 0.0, 1.0)[:, :, None]
        return SynthSample(
            image=image,
            instruction=(TOKEN_ID[word],),
            gt_mask=BinaryMask(values=blobs[target].mask.astype(np.float64)),
            sample_id=sample_id if sample_id is not None else f"s{seed:010d}",
            labeled=labeled,
            blobs=tuple(blobs),
            target_index=target,
        )
    raise GenerationError(f"could not build a valid scene for seed {seed}")


def instruction_holds(s: SynthSample, cfg: WorldConfig = WorldConfig()) -> bool:
    """Check that the instruction's unique referent is the ground-truth blob."""
    word = VOCAB[s.instruction[0]]
    candidates = dict(_candidate_instructions(s.blobs, cfg))
    return candidates.get(word) == s.target_index


# ---------------------------------------------------------------------------
# external-prior generation


def _ramp(mask: np.ndarray) -> np.ndarray:
    """Soft foreground map from a binary mask: a signed-distance sigmoid
    saturating near 0.9 inside and 0.1 outside, crossing 0.5 on the edge."""
    m = mask.astype(bool)
    if not m.any():
        return np.full(mask.shape, 0.1)
    sd = distance_transform_edt(m) - distance_transform_edt(~m)
    return 0.1 + 0.8 * expit(RAMP_SLOPE * sd)


def _squash(p: np.ndarray, factor: float) -> np.ndarray:
    return 0.5 + factor * (p - 0.5)


def resolve_mode(noise: PriorNoiseConfig, rng: np.random.Generator) -> str:
    if noise.mode != "mixed":
        return noise.mode
    w = np.asarray(noise.mix_weights, dtype=np.float64)
    return NOISE_MODES[int(rng.choice(len(NOISE_MODES), p=w / w.sum()))]


def gen_prior(s: SynthSample, noise: PriorNoiseConfig, seed: int) -> ProbMap:
    rng = np.random.default_rng(seed)
    mode = resolve_mode(noise, rng)
    gt = s.gt_mask.values.astype(bool)

    if mode == "faithful":
        p = _ramp(gt)
    elif mode == "boundary_jitter":
        dy, dx = rng.integers(-4, 5, size=2)
        shifted = np.roll(gt, (dy, dx), axis=(0, 1))
        iters = int(rng.integers(1, 4))
        if rng.uniform() < 0.5:
            warped = binary_dilation(shifted, iterations=iters)
        else:
            eroded = binary_erosion(shifted, iterations=iters)
            warped = eroded if eroded.any() else shifted
        p = gaussian_filter(_ramp(warped), sigma=noise.blur_radius)
        # drifted boundaries come with hedged confidence, unlike the
        # confidently-wrong distractor/hallucination failure cases
        p = _squash(p, 0.5 + 0.35 * rng.uniform())
    elif mode == "distractor_swap":
        others = [i for i in range(len(s.blobs)) if i != s.target_index]
        if others and rng.uniform() < noise.swap_prob:
            wrong = s.blobs[int(rng.choice(others))]
            p = _ramp(wrong.mask)
        else:
            p = _ramp(gt)
    elif mode == "hallucinate":
        p = _ramp(_phantom_region(s, rng))
    elif mode == "under_confident":
        p = _squash(_ramp(gt), 0.2 + 0.4 * rng.uniform())
    else:  # pragma: no cover - PriorNoiseConfig validates modes
        raise ValueError(f"unknown noise mode {mode!r}")

    p = _squash(p, noise.reliability)
    return ProbMap(values=np.clip(p, 0.0, 1.0))


def _phantom_region(s: SynthSample, rng: np.random.Generator) -> np.ndarray:
    """An ellipse on empty background, away from every real blob."""
    size = s.image.shape[0]
    occupied = np.zeros((size, size), dtype=bool)
    for blob in s.blobs:
        occupied |= blob.mask
    occupied = binary_dilation(occupied, iterations=2)
    for _ in range(50):
        a = rng.uniform(2.0, 5.0)
        b = rng.uniform(2.0, 5.0)
        cy = rng.uniform(a + 1, size - 2 - a)
        cx = rng.uniform(b + 1, size - 2 - b)
        mask = _blob_mask("ellipse", cy, cx, a, b, size)
        if mask.any() and not (mask & occupied).any():
            return mask
    # crowded scene: fall back to a far translation of the target
    return np.roll(s.gt_mask.values.astype(bool), (size // 2, size // 2), axis=(0, 1))


# ---------------------------------------------------------------------------
# augmentations


def flip_tokens(instruction: tuple[int, ...]) -> tuple[int, ...]:
    left, right = TOKEN_ID["left"], TOKEN_ID["right"]
    swap = {left: right, right: left}
    return tuple(swap.get(t, t) for t in instruction)


def _flip_sample(s: SynthSample) -> SynthSample:
    w = s.image.shape[1]
    flipped_blobs = tuple(
        Blob(kind=b.kind, mask=b.mask[:, ::-1].copy(),
             centroid=(b.centroid[0], (w - 1) - b.centroid[1]),
             area=b.area, intensity=b.intensity)
        for b in s.blobs
    )
    return SynthSample(
        image=s.image[:, ::-1, :].copy(),
        instruction=flip_tokens(s.instruction),
        gt_mask=BinaryMask(values=s.gt_mask.values[:, ::-1].copy()),
        sample_id=s.sample_id,
        labeled=s.labeled,
        blobs=flipped_blobs,
        target_index=s.target_index,
    )


def weak_augment(s: SynthSample, seed: int) -> tuple[SynthSample, TransformRecord]:
    """Horizontal flip with probability 0.5, swapping left/right tokens so the
    instruction still names the same physical blob."""
    rng = np.random.default_rng(seed)
    if rng.uniform() < 0.5:
        return _flip_sample(s), TransformRecord(flipped=True)
    return s, TransformRecord(flipped=False)


def undo_weak(grid: np.ndarray, record: TransformRecord) -> np.ndarray:
    """Map a (H, W) map produced in the weak view back to the original frame."""
    return grid[:, ::-1].copy() if record.flipped else grid


def brightness(img: np.ndarray, alpha: float) -> np.ndarray:
    return np.clip(img * alpha, 0.0, 1.0)


def contrast(img: np.ndarray, alpha: float) -> np.ndarray:
    m = img.mean()
    return np.clip(m + alpha * (img - m), 0.0, 1.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return np.clip(gaussian_filter(img, sigma=(sigma, sigma, 0.0)), 0.0, 1.0)


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** bits
    return np.clip(np.floor(img * levels) / levels, 0.0, 1.0)


STRONG_OPS = ("identity", "brightness", "contrast", "gaussian_blur", "posterize")


def strong_augment(s: SynthSample, seed: int) -> SynthSample:
    """Apply 1-2 photometric perturbations; geometry and mask are untouched."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 3))
    ops = rng.choice(len(STRONG_OPS), size=k, replace=False)
    img = s.image
    for op in ops:
        name = STRONG_OPS[int(op)]
        if name == "identity":
            continue
        if name == "brightness":
            img = brightness(img, rng.uniform(0.1, 0.95))
        elif name == "contrast":
            img = contrast(img, rng.uniform(0.1, 0.95))
        elif name == "gaussian_blur":
            img = gaussian_blur(img, rng.uniform(0.1, 2.0))
        elif name == "posterize":
            img = posterize(img, int(rng.integers(4, 9)))
    return dataclasses.replace(s, image=img)


# ---------------------------------------------------------------------------
# corpus


@dataclass(eq=False)
class Corpus:
    labeled: list[SynthSample]
    unlabeled: list[SynthSample]
    test: list[SynthSample]
    priors: dict[str, ProbMap]
    noise_modes: dict[str, str]
    seeds: dict[str, int]
    seed: int

    def manifest_rows(self):
        rows = []
        for split_name, split in (("labeled", self.labeled), ("unlabeled", self.unlabeled),
                                  ("test", self.test)):
            for s in split:
                rows.append((s.sample_id, split_name, self.seeds[s.sample_id],
                             self.noise_modes.get(s.sample_id, "-")))
        return rows


def _sample_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def make_corpus(n_labeled: int, n_unlabeled: int, n_test: int, seed: int,
                world_cfg: WorldConfig = WorldConfig(),
                noise_cfg: PriorNoiseConfig = PriorNoiseConfig()) -> Corpus:
    if min(n_labeled, n_unlabeled, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    total = n_labeled + n_unlabeled + n_test
    seeds = _sample_seeds(seed, total + 1)
    mode_rng = np.random.default_rng(seeds[-1])

    specs = []  # (sample_id, split, seed, labeled)
    for i in range(n_labeled):
        specs.append((f"lab{i:05d}", "labeled", seeds[i], True))
    for i in range(n_unlabeled):
        specs.append((f"unl{i:05d}", "unlabeled", seeds[n_labeled + i], False))
    for i in range(n_test):
        specs.append((f"tst{i:05d}", "test", seeds[n_labeled + n_unlabeled + i], False))

    splits = {"labeled": [], "unlabeled": [], "test": []}
    priors, modes, seed_of = {}, {}, {}
    for sample_id, split, s_seed, labeled in specs:
        sample = gen_sample(s_seed, world_cfg, sample_id=sample_id, labeled=labeled)
        splits[split].append(sample)
        seed_of[sample_id] = s_seed
        if split == "unlabeled":
            mode = resolve_mode(noise_cfg, mode_rng)
            modes[sample_id] = mode
            priors[sample_id] = gen_prior(sample, replace(noise_cfg, mode=mode),
                                          s_seed ^ PRIOR_SEED_SALT)
    return Corpus(labeled=splits["labeled"], unlabeled=splits["unlabeled"],
                  test=splits["test"], priors=priors, noise_modes=modes,
                  seeds=seed_of, seed=seed)


# ---------------------------------------------------------------------------
# manifest and map-file export


MANIFEST_HEADER = "sample_id,split,seed,noise_mode"


def write_manifest(path, corpus: Corpus, config_hash: str = "-"):
    lines = [f"# config_hash: {config_hash}",
             f"# counts: labeled={len(corpus.labeled)} unlabeled={len(corpus.unlabeled)} "
             f"test={len(corpus.test)}",
             f"# corpus_seed: {corpus.seed}",
             MANIFEST_HEADER]
    for sample_id, split, s_seed, mode in corpus.manifest_rows():
        lines.append(f"{sample_id},{split},{s_seed},{mode}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def manifest_hash(path) -> str:
    with open(path) as f:
        body = [ln for ln in f.read().splitlines() if not ln.startswith("#")]
    return hashlib.sha256("\n".join(body).encode()).hexdigest()


def read_manifest(path):
    """Rows (sample_id, split, seed, noise_mode) plus the recorded corpus seed."""
    rows = []
    corpus_seed = None
    with open(path) as f:
        for ln in f.read().splitlines():
            if ln.startswith("# corpus_seed:"):
                corpus_seed = int(ln.split(":")[1])
            if not ln or ln.startswith("#") or ln == MANIFEST_HEADER:
                continue
            sample_id, split, s_seed, mode = ln.split(",")
            rows.append((sample_id, split, int(s_seed), mode))
    return rows, corpus_seed


def load_corpus(manifest_path, world_cfg: WorldConfig = WorldConfig(),
                noise_cfg: PriorNoiseConfig = PriorNoiseConfig()) -> Corpus:
    """Regenerate the corpus from its manifest; the recorded per-sample seeds
    and resolved noise modes are authoritative, exported maps are not needed."""
    rows, corpus_seed = read_manifest(manifest_path)
    splits = {"labeled": [], "unlabeled": [], "test": []}
    priors, modes, seed_of = {}, {}, {}
    for sample_id, split, s_seed, mode in rows:
        if split not in splits:
            raise ValueError(f"unknown split {split!r} in manifest")
        sample = gen_sample(s_seed, world_cfg, sample_id=sample_id,
                            labeled=split == "labeled")
        splits[split].append(sample)
        seed_of[sample_id] = s_seed
        if split == "unlabeled":
            modes[sample_id] = mode
            priors[sample_id] = gen_prior(sample, replace(noise_cfg, mode=mode),
                                          s_seed ^ PRIOR_SEED_SALT)
    return Corpus(labeled=splits["labeled"], unlabeled=splits["unlabeled"],
                  test=splits["test"], priors=priors, noise_modes=modes,
                  seeds=seed_of, seed=corpus_seed if corpus_seed is not None else -1)
