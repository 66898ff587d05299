"""Speed augmentation: time-compressing action sequences by an acceleration factor.

An acceleration factor ``v >= 1`` maps chunk slot ``i`` (1-based) to source
index ``t + i*v - 1``, so a chunk of horizon H covers v times more demonstrated
time. Fractional indices are resolved by linear interpolation; indices past the
end of the demonstration hold the final action (demos end at success, so the
final position target is the natural continuation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream


@dataclass(frozen=True)
class AugmentConfig:
    """How acceleration factors are drawn during pre-training.

    mode "none" leaves targets untouched (v = 1 always), "constant" always uses
    ``v``, "uniform" draws v ~ U(1, v_max) afresh for every sampled chunk.
    """

    mode: str = "none"  # none | constant | uniform
    v: float = 3.0
    v_max: float = 3.0
    interp: str = "standard"  # standard | paper
    pad: str = "hold_last"

    def __post_init__(self):
        if self.mode not in ("none", "constant", "uniform"):
            raise ValueError(f"unknown augment mode: {self.mode!r}")
        if self.interp not in ("standard", "paper"):
            raise ValueError(f"unknown interp mode: {self.interp!r}")
        if self.pad != "hold_last":
            raise ValueError(f"unknown pad mode: {self.pad!r}")
        if self.v < 1.0 or self.v_max < 1.0:
            raise ValueError("acceleration factors must be >= 1")


def accel(
    source: np.ndarray,
    t: int,
    v: float,
    H: int,
    interp: str = "standard",
    pad: str = "hold_last",
) -> np.ndarray:
    """Time-compress ``source[t:]`` by factor ``v`` into an H-step chunk.

    Chunk slot i (i = 1..H) reads source index ``t + i*v - 1``. A fractional
    index x between integers lo = floor(x), hi = ceil(x) is resolved as

        standard: a_lo + (x - lo) * (a_hi - a_lo)
        paper:    a_lo + ((x - lo) / v) * (a_hi - a_lo)

    The "paper" coefficient is not a convex combination for v > 1; it is kept
    behind the flag for fidelity while "standard" is the geometric default.
    Indices at or past the end of the source hold the last action.
    """
    source = np.asarray(source)
    if source.ndim == 1:
        source = source[:, None]
        squeeze = True
    else:
        squeeze = False
    L = len(source)
    if L == 0:
        raise ValueError("empty source sequence")
    if v < 1.0:
        raise ValueError(f"acceleration factor must be >= 1, got {v}")
    if H < 1:
        raise ValueError(f"horizon must be >= 1, got {H}")
    if not (0 <= t < L):
        raise ValueError(f"start index {t} outside source of length {L}")
    if pad != "hold_last":
        raise ValueError(f"unknown pad mode: {pad!r}")
    if interp not in ("standard", "paper"):
        raise ValueError(f"unknown interp mode: {interp!r}")

    idx = t + np.arange(1, H + 1, dtype=np.float64) * float(v) - 1.0
    lo = np.floor(idx)
    frac = idx - lo
    if interp == "paper":
        frac = frac / float(v)
    lo_i = np.clip(lo.astype(np.int64), 0, L - 1)
    hi_i = np.clip(np.ceil(idx).astype(np.int64), 0, L - 1)
    a_lo = source[lo_i].astype(np.float64)
    a_hi = source[hi_i].astype(np.float64)
    out = a_lo + frac[:, None] * (a_hi - a_lo)
    # Past-the-end slots hold the final action exactly (no interpolation).
    past = lo.astype(np.int64) >= L - 1
    out[past] = source[L - 1]
    out = out.astype(source.dtype if source.dtype.kind == "f" else np.float64)
    return out[:, 0] if squeeze else out


def sample_factor(config: AugmentConfig, rng: RngStream | np.random.Generator) -> float:
    """Draw one acceleration factor according to the augment mode."""
    if config.mode == "none":
        return 1.0
    if config.mode == "constant":
        return float(config.v)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return float(gen.uniform(1.0, config.v_max))
