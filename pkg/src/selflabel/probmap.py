"""Probability maps over pixel grids: partitioning, statistics, file format.

A probability map is an H x W float64 grid in [0, 1].  Pseudo-label
partitioning assigns FG / BG / IGNORE per pixel from a pair of thresholds,
then relabels a Chebyshev band around every FG/BG interface as IGNORE so
that uncertain boundary pixels never supervise the student.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

BG = 0
FG = 1
IGNORE = 255

MAP_MAGIC = b"L2LM"
MAP_VERSION = 1


class MapFormatError(ValueError):
    """Raised when a map file fails validation."""


def _values(p) -> np.ndarray:
    """Accept a ProbMap/BinaryMask or a bare 2-d array."""
    v = p.values if hasattr(p, "values") else np.asarray(p, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-d grid, got shape {v.shape}")
    return v


@dataclass
class ProbMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"ProbMap must be 2-d, got {self.values.shape}")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("ProbMap values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"BinaryMask must be 2-d, got {self.values.shape}")
        if not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise ValueError("BinaryMask values must be exactly 0.0 or 1.0")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PixelPartition:
    """Per-pixel FG / BG / IGNORE labels plus the thresholds that made them."""

    labels: np.ndarray          # uint8, values in {BG, FG, IGNORE}
    tau_fg: float
    tau_bg: float
    band_radius: int

    @property
    def fg(self) -> np.ndarray:
        return self.labels == FG

    @property
    def bg(self) -> np.ndarray:
        return self.labels == BG

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    @property
    def selected(self) -> np.ndarray:
        return self.labels != IGNORE


def partition_pixels(p, tau_fg: float, tau_bg: float, band_radius: int = 0) -> PixelPartition:
    """Threshold a probability map into FG / BG / IGNORE.

    p >= tau_fg -> FG, p <= tau_bg -> BG, otherwise IGNORE.  Afterwards, any
    pixel whose Chebyshev ball of radius ``band_radius`` (clipped at the
    image border) contains both an FG and a BG pixel is relabeled IGNORE.
    """
    if not (0.0 <= tau_bg <= tau_fg <= 1.0):
        raise ValueError(f"need 0 <= tau_bg <= tau_fg <= 1, got ({tau_fg}, {tau_bg})")
    if band_radius < 0:
        raise ValueError("band_radius must be non-negative")
    v = _values(p)
    labels = np.full(v.shape, IGNORE, dtype=np.uint8)
    labels[v <= tau_bg] = BG
    labels[v >= tau_fg] = FG     # FG rule wins where the thresholds touch
    if band_radius > 0:
        size = 2 * band_radius + 1
        fg_near = maximum_filter((labels == FG).astype(np.uint8), size=size,
                                 mode="constant", cval=0)
        bg_near = maximum_filter((labels == BG).astype(np.uint8), size=size,
                                 mode="constant", cval=0)
        labels[(fg_near > 0) & (bg_near > 0)] = IGNORE
    return PixelPartition(labels=labels, tau_fg=float(tau_fg),
                          tau_bg=float(tau_bg), band_radius=int(band_radius))


def class_ratios(part: PixelPartition) -> tuple[float, float, float]:
    """(r_pos, r_neg, r_ign) as fractions of all pixels; they sum to one."""
    n = part.labels.size
    r_pos = float(np.count_nonzero(part.labels == FG)) / n
    r_neg = float(np.count_nonzero(part.labels == BG)) / n
    return r_pos, r_neg, 1.0 - r_pos - r_neg


def mean_std(p) -> tuple[float, float]:
    """Mean and population standard deviation of a probability map."""
    v = _values(p)
    return float(v.mean()), float(v.std())


def confidence_score(p) -> float:
    """Mean squared distance from maximal uncertainty: mean of (2p - 1)^2."""
    v = _values(p)
    return float(np.mean((2.0 * v - 1.0) ** 2))


def iou(a, b) -> float:
    """Intersection over union of two binary masks; two empty masks give 1."""
    av = _values(a) > 0.5
    bv = _values(b) > 0.5
    union = np.count_nonzero(av | bv)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(av & bv)) / union


# ---------------------------------------------------------------------------
# map file format: magic "L2LM", three little-endian uint32 (version=1,
# height, width), then height*width float32 values in row-major order.


def write_map_file(path, values: np.ndarray):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise MapFormatError(f"map files store 2-d grids, got {v.shape}")
    h, w = v.shape
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<III", MAP_VERSION, h, w))
        f.write(v.astype("<f4").tobytes())


def read_map_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAP_MAGIC:
        raise MapFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise MapFormatError(f"{path}: truncated header")
    version, h, w = struct.unpack("<III", blob[4:16])
    if version != MAP_VERSION:
        raise MapFormatError(f"{path}: unsupported version {version}")
    payload = blob[16:]
    if len(payload) != 4 * h * w:
        raise MapFormatError(f"{path}: payload is {len(payload)} bytes, "
                             f"expected {4 * h * w}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w)


def load_prob_map(path) -> ProbMap:
    v = read_map_file(path)
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise MapFormatError(f"{path}: probability values outside [0, 1]")
    return ProbMap(v)


def load_binary_mask(path) -> BinaryMask:
    v = read_map_file(path)
    if not np.all((v == 0.0) | (v == 1.0)):
        raise MapFormatError(f"{path}: mask values must be exactly 0 or 1")
    return BinaryMask(v)
