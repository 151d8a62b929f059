"""Intensity standardization by histogram-summit detection.

Each cropped lung image is mapped so that its two characteristic
histogram summits (dark parenchyma, bright vessels/mediastinum) land on a
fixed target spectrum.  The map is the two-point affine transform sending
summit s1 to target t1 and s2 to t2, followed by clamping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DegenerateRange, DimsMismatch, EmptyMask, TwoSummitsNotFound
from .volcore import Mask, Volume


@dataclass
class Histogram:
    counts: np.ndarray          # B nonnegative integers
    lo: float                   # intensity range [lo, hi]
    hi: float

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.bins

    def bin_center(self, i: int) -> float:
        return self.lo + (i + 0.5) * self.bin_width


@dataclass
class StandardizerConfig:
    bins: int = 256
    smoothing_window: int = 5          # centered moving average, odd width
    min_prominence: float = 0.05       # fraction of the smoothed maximum
    targets: tuple[float, float] = (200.0, 1200.0)
    clamp: tuple[float, float] = (0.0, 4095.0)

    def __post_init__(self):
        t1, t2 = self.targets
        lo, hi = self.clamp
        if self.bins < 8:
            raise ValueError("bins must be >= 8")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be a positive odd integer")
        if not 0 < self.min_prominence < 1:
            raise ValueError("min_prominence must lie in (0, 1)")
        if not (t1 < t2 and lo <= t1 and t2 <= hi):
            raise ValueError("require clamp.lo <= t1 < t2 <= clamp.hi")

    def to_json(self) -> str:
        d = asdict(self)
        d["targets"] = list(self.targets)
        d["clamp"] = list(self.clamp)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StandardizerConfig":
        d = json.loads(text)
        d["targets"] = tuple(d["targets"])
        d["clamp"] = tuple(d["clamp"])
        return cls(**d)


def _tallied_values(vol: Volume, mask: Mask | None) -> np.ndarray:
    if mask is None:
        return vol.data.reshape(-1)
    if mask.dims != vol.dims:
        raise DimsMismatch(f"mask dims {mask.dims} != volume dims {vol.dims}")
    sel = mask.data != 0
    if not sel.any():
        raise EmptyMask("mask has no nonzero voxel")
    return vol.data[sel].reshape(-1)


def compute_histogram(vol: Volume, mask: Mask | None,
                      cfg: StandardizerConfig) -> Histogram:
    """Tally (masked) voxel values into equal-width bins over [min, max]."""
    values = _tallied_values(vol, mask).astype(np.float64)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise DegenerateRange(f"all tallied values equal {lo}")
    counts, _ = np.histogram(values, bins=cfg.bins, range=(lo, hi))
    return Histogram(counts=counts.astype(np.int64), lo=lo, hi=hi)


def _smooth(counts: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    out = np.empty(len(counts), dtype=np.float64)
    for i in range(len(counts)):
        a, b = max(0, i - half), min(len(counts), i + half + 1)
        out[i] = counts[a:b].mean()
    return out


def find_summits(hist: Histogram, cfg: StandardizerConfig) -> tuple[float, float]:
    """Locate the first qualifying local maximum from each histogram edge.

    A bin qualifies when the smoothed count is a local maximum (>= both
    neighbors where they exist) with height at least min_prominence times
    the smoothed global maximum.  Returns (s1, s2) bin centers, s1 < s2.
    """
    smoothed = _smooth(hist.counts.astype(np.float64), cfg.smoothing_window)
    floor = cfg.min_prominence * smoothed.max()
    n = len(smoothed)

    # group bins into plateaus (runs of equal smoothed value); a plateau is
    # a summit when both neighbors outside the run are strictly lower
    summits = []   # center index per qualifying plateau, low to high
    a = 0
    while a < n:
        b = a
        while b + 1 < n and smoothed[b + 1] == smoothed[a]:
            b += 1
        val = smoothed[a]
        left_ok = a == 0 or smoothed[a - 1] < val
        right_ok = b == n - 1 or smoothed[b + 1] < val
        if left_ok and right_ok and val > 0 and val >= floor:
            summits.append((a + b) // 2)
        a = b + 1

    if len(summits) < 2:
        raise TwoSummitsNotFound(
            f"found {len(summits)} qualifying summit(s), need two")
    s1_idx, s2_idx = summits[0], summits[-1]
    return hist.bin_center(s1_idx), hist.bin_center(s2_idx)


def standardize(vol: Volume, mask: Mask | None,
                cfg: StandardizerConfig) -> Volume:
    """Affinely map the volume so its summits land on cfg.targets, then clamp."""
    hist = compute_histogram(vol, mask, cfg)
    s1, s2 = find_summits(hist, cfg)
    t1, t2 = cfg.targets
    scale = (t2 - t1) / (s2 - s1)
    data = t1 + (vol.data.astype(np.float64) - s1) * scale
    np.clip(data, cfg.clamp[0], cfg.clamp[1], out=data)
    return Volume(data=data, spacing=vol.spacing)
