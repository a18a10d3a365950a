"""Synthetic dual-polarization SAR chip generator.

Stands in for real satellite acquisitions so the whole pipeline can be
exercised and tested hermetically.  Each chip is a smooth random backscatter
field observed twice under independent multiplicative speckle; positive chips
additionally brighten elliptical blobs in the post-event image and record
them in the mask.

Speckle follows the standard multi-look model: unit-mean gamma noise whose
shape parameter equals the number of looks, so fewer looks means heavier
noise.  Every chip is generated from its own seed stream derived from
(seed, chip index), which makes generation order-independent and
reproducible chip by chip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chips import CHANNEL_NAMES, CHIP_SIZE, Chip, ChipSet
from .errors import ConfigError

# Per-channel mean amplitude ranges for the clean scene (VV brighter than VH,
# as is typical for terrain backscatter).
_SCENE_AMPLITUDE_RANGES = ((0.5, 1.5), (0.2, 0.8))
_TEXTURE_CELLS = 8          # control grid resolution of the smooth field
_TEXTURE_SPAN = (0.8, 1.25)  # multiplicative texture range


@dataclass
class SyntheticConfig:
    """Knobs for the generator; see generate_synthetic_chipset."""

    n_chips: int
    seed: int
    positive_fraction: float = 0.5
    looks: int = 4
    contrast: float = 3.0
    blob_count_range: tuple[int, int] = (1, 4)
    blob_radius_range_px: tuple[int, int] = (6, 20)

    def validate(self) -> None:
        if self.n_chips < 1:
            raise ConfigError(f"n_chips must be >= 1, got {self.n_chips}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError(
                f"positive_fraction must be in [0, 1], got {self.positive_fraction}"
            )
        if self.looks < 1:
            raise ConfigError(f"looks must be >= 1, got {self.looks}")
        if self.contrast <= 0:
            raise ConfigError(f"contrast must be > 0, got {self.contrast}")
        lo, hi = self.blob_count_range
        if not (1 <= lo <= hi):
            raise ConfigError(
                f"blob_count_range must satisfy 1 <= lo <= hi, got {self.blob_count_range}"
            )
        lo, hi = self.blob_radius_range_px
        if not (1 <= lo <= hi):
            raise ConfigError(
                f"blob_radius_range_px must satisfy 1 <= lo <= hi, "
                f"got {self.blob_radius_range_px}"
            )
        if hi > CHIP_SIZE // 2 - 1:
            raise ConfigError(
                f"blob radius {hi} too large for blobs to fit inside a "
                f"{CHIP_SIZE}px chip"
            )


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Bilinear upsample of a coarse random grid; values in _TEXTURE_SPAN."""
    lo, hi = _TEXTURE_SPAN
    grid = rng.uniform(lo, hi, size=(_TEXTURE_CELLS + 1, _TEXTURE_CELLS + 1))
    coords = np.linspace(0.0, _TEXTURE_CELLS, size)
    i0 = np.minimum(coords.astype(int), _TEXTURE_CELLS - 1)
    frac = coords - i0
    # Interpolate rows then columns.
    rows = grid[i0] * (1 - frac)[:, None] + grid[i0 + 1] * frac[:, None]
    return rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def _elliptical_mask(rng: np.random.Generator, count_range, radius_range) -> np.ndarray:
    """Union of random ellipses placed so each fits fully inside the chip."""
    rr, cc = np.mgrid[0:CHIP_SIZE, 0:CHIP_SIZE]
    mask = np.zeros((CHIP_SIZE, CHIP_SIZE), dtype=bool)
    n_blobs = int(rng.integers(count_range[0], count_range[1] + 1))
    for _ in range(n_blobs):
        a = rng.uniform(radius_range[0], radius_range[1])
        b = rng.uniform(radius_range[0], radius_range[1])
        theta = rng.uniform(0.0, np.pi)
        margin = int(np.ceil(max(a, b))) + 1
        cr = rng.uniform(margin, CHIP_SIZE - 1 - margin)
        ccol = rng.uniform(margin, CHIP_SIZE - 1 - margin)
        dr = rr - cr
        dc = cc - ccol
        u = dr * np.cos(theta) + dc * np.sin(theta)
        v = -dr * np.sin(theta) + dc * np.cos(theta)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask.astype(np.uint8)


def _speckle(rng: np.random.Generator, looks: int, shape) -> np.ndarray:
    """Unit-mean multiplicative gamma speckle, shape parameter = looks."""
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def _generate_chip(config: SyntheticConfig, index: int, positive: bool) -> Chip:
    rng = np.random.default_rng(
        np.random.PCG64(np.random.SeedSequence((config.seed, index)))
    )
    texture = _smooth_field(rng, CHIP_SIZE)
    clean = np.empty((len(CHANNEL_NAMES), CHIP_SIZE, CHIP_SIZE))
    for ch, (lo, hi) in enumerate(_SCENE_AMPLITUDE_RANGES):
        clean[ch] = rng.uniform(lo, hi) * texture

    if positive:
        mask = _elliptical_mask(rng, config.blob_count_range,
                                config.blob_radius_range_px)
    else:
        mask = np.zeros((CHIP_SIZE, CHIP_SIZE), dtype=np.uint8)

    post_clean = clean * np.where(mask, config.contrast, 1.0)
    pre = clean * _speckle(rng, config.looks, clean.shape)
    post = post_clean * _speckle(rng, config.looks, clean.shape)
    return Chip(
        chip_id=f"synth-{config.seed}-{index:05d}",
        pre=pre.astype(np.float32),
        post=post.astype(np.float32),
        mask=mask,
        has_landslide=bool(mask.sum() > 0),
    )


def generate_synthetic_chipset(config: SyntheticConfig) -> ChipSet:
    """Generate a deterministic chip set from the config.

    The first round(positive_fraction * n_chips) chips carry landslides, the
    rest are unchanged scenes; callers that need a shuffled order get one for
    free from the splitter.
    """
    config.validate()
    n_pos = int(np.floor(config.positive_fraction * config.n_chips + 0.5))
    chips = [
        _generate_chip(config, i, positive=(i < n_pos))
        for i in range(config.n_chips)
    ]
    provenance = (
        f"synthetic(seed={config.seed}, n={config.n_chips}, "
        f"pos={config.positive_fraction}, looks={config.looks}, "
        f"contrast={config.contrast})"
    )
    return ChipSet(chips, provenance=provenance)
