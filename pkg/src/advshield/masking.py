"""Input corruptions used to train reformers: time, channel and magnitude masking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RULE_ZERO = "zero"
RULE_REPLACE = "replace"
RULE_KEEP = "keep"
_RULES = (RULE_ZERO, RULE_REPLACE, RULE_KEEP)
_RULE_PROBS = (0.8, 0.1, 0.1)
_ORDER = "TCM"
_MAX_RETRIES = 100


@dataclass(frozen=True)
class MaskConfig:
    wc: int = 5
    pt: float = 0.15
    wt: int = 7
    pn: float = 0.15
    var: float = 0.2
    strategies: str = "TCM"

    def __post_init__(self):
        if self.wc < 1 or self.wt < 1:
            raise ValueError("mask widths must be >= 1")
        if not 0.0 <= self.pt <= 1.0 or not 0.0 <= self.pn <= 1.0:
            raise ValueError("mask probabilities must lie in [0, 1]")
        if self.var < 0:
            raise ValueError("noise variance must be >= 0")
        bad = set(self.strategies) - set(_ORDER)
        if bad:
            raise ValueError(f"unknown masking strategies {sorted(bad)}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ValueError(f"repeated strategy in {self.strategies!r}")


@dataclass
class ChannelMask:
    start: int | None  # None when the no-mask branch was taken
    width: int


@dataclass
class TimeBlock:
    start: int
    width: int
    rule: str
    sources: np.ndarray | None = None  # replacement frame index per frame in the block


@dataclass
class TimeMask:
    blocks: list[TimeBlock] = field(default_factory=list)

    @property
    def selected_frames(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([np.arange(b.start, b.start + b.width) for b in self.blocks]))


def mask_channel(x: np.ndarray, wc: int, rng: np.random.Generator) -> tuple[np.ndarray, ChannelMask]:
    """Zero one contiguous channel block across all frames, or nothing with probability ``1/(wc+1)``."""
    d = x.shape[1]
    if wc > d:
        raise ValueError(f"channel block width {wc} exceeds feature dim {d}")
    if rng.random() < 1.0 / (wc + 1):
        return x.copy(), ChannelMask(None, wc)
    start = int(rng.integers(0, d - wc + 1))
    out = x.copy()
    out[:, start:start + wc] = 0.0
    return out, ChannelMask(start, wc)


def _sample_block_starts(n_frames: int, n_blocks: int, wt: int, rng: np.random.Generator) -> list[int]:
    hi = n_frames - wt + 1
    for _ in range(_MAX_RETRIES):
        starts = np.sort(rng.integers(0, hi, size=n_blocks))
        if n_blocks < 2 or np.all(np.diff(starts) >= wt):
            return starts.tolist()
    return starts.tolist()


def mask_time(x: np.ndarray, pt: float, wt: int, rng: np.random.Generator) -> tuple[np.ndarray, TimeMask]:
    """Select about ``pt`` of the frames in blocks of ``wt`` and apply the 80/10/10 rule per block.

    Blocks are zeroed, replaced frame-by-frame with other randomly chosen
    frames, or left unchanged.
    """
    t = x.shape[0]
    if wt > t:
        raise ValueError(f"time block width {wt} exceeds {t} frames")
    n_blocks = int(round(pt * t / wt))
    out = x.copy()
    meta = TimeMask()
    if n_blocks == 0:
        return out, meta
    for start in _sample_block_starts(t, n_blocks, wt, rng):
        rule = _RULES[int(rng.choice(3, p=_RULE_PROBS))]
        block = TimeBlock(start, wt, rule)
        frames = np.arange(start, start + wt)
        if rule == RULE_ZERO:
            out[frames] = 0.0
        elif rule == RULE_REPLACE:
            if t < 2:
                block.rule = RULE_KEEP
            else:
                # uniform over every index except the frame being replaced
                src = rng.integers(0, t - 1, size=wt)
                src = src + (src >= frames)
                block.sources = src
                out[frames] = x[src]
        meta.blocks.append(block)
    return out, meta


def mask_magnitude(x: np.ndarray, pn: float, var: float, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """With probability ``pn`` add i.i.d. zero-mean Gaussian noise of variance ``var`` to every cell."""
    if var < 0:
        raise ValueError("noise variance must be >= 0")
    if rng.random() >= pn:
        return x.copy(), False
    if var == 0:
        return x.copy(), True
    return x + rng.normal(0.0, np.sqrt(var), size=x.shape).astype(x.dtype), True


def compose_masks(config: MaskConfig):
    """Return ``f(x, rng)`` applying the configured strategies in the order T, C, M."""
    if not config.strategies:
        raise ValueError("at least one masking strategy is required")
    steps = [s for s in _ORDER if s in config.strategies]

    def apply(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = np.asarray(x)
        for s in steps:
            if s == "T":
                out, _ = mask_time(out, config.pt, config.wt, rng)
            elif s == "C":
                out, _ = mask_channel(out, config.wc, rng)
            else:
                out, _ = mask_magnitude(out, config.pn, config.var, rng)
        return out

    return apply
