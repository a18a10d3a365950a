"""Chip data model, on-disk format, extraction, balancing and splitting.

A chip is a bitemporal pair of dual-polarization SAR amplitude images
(2 channels, VV and VH, 128 x 128 pixels at 10 m spacing) plus a binary
landslide mask and a chip-level landslide flag.  Chips are stored as a JSON
header sidecar next to a raw little-endian float32 payload so they round-trip
bit-exactly and stay readable from any language.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, FormatError

CHIP_SIZE = 128
CHANNEL_NAMES = ("VV", "VH")
PIXEL_SPACING_M = 10

# Split roles, in allocation order.  The order matters: largest-remainder
# ties go to the earlier role.
ROLES = ("pretrain", "seg_train", "validation", "test")

# Amplitude floor applied before the dB transform so zeros stay finite.
AMPLITUDE_FLOOR = 1e-6

_CHIPSET_INDEX = "chipset.json"


@dataclass(eq=False)
class Chip:
    """One bitemporal SAR chip with its pixel mask and chip-level flag."""

    chip_id: str
    pre: np.ndarray   # (2, 128, 128) float32, linear amplitude
    post: np.ndarray  # (2, 128, 128) float32, linear amplitude
    mask: np.ndarray  # (128, 128) uint8, 1 = landslide pixel
    has_landslide: bool

    def __post_init__(self):
        expected = (len(CHANNEL_NAMES), CHIP_SIZE, CHIP_SIZE)
        if self.pre.shape != expected or self.post.shape != expected:
            raise DataError(
                f"chip {self.chip_id!r}: pre/post must have shape {expected}, "
                f"got {self.pre.shape} and {self.post.shape}"
            )
        if self.mask.shape != (CHIP_SIZE, CHIP_SIZE):
            raise DataError(
                f"chip {self.chip_id!r}: mask must have shape "
                f"({CHIP_SIZE}, {CHIP_SIZE}), got {self.mask.shape}"
            )
        if not (np.isfinite(self.pre).all() and np.isfinite(self.post).all()):
            raise DataError(f"chip {self.chip_id!r}: non-finite amplitude values")
        if not np.isin(self.mask, (0, 1)).all():
            raise FormatError(f"chip {self.chip_id!r}: mask not binary")
        if bool(self.has_landslide) != bool(self.mask.sum() > 0):
            raise DataError(
                f"chip {self.chip_id!r}: has_landslide={self.has_landslide} "
                "disagrees with mask content"
            )


@dataclass(eq=False)
class ChipSet:
    """Ordered collection of chips with a free-text provenance tag."""

    chips: list[Chip]
    provenance: str = ""
    pixel_spacing_m: int = PIXEL_SPACING_M

    def __post_init__(self):
        ids = [c.chip_id for c in self.chips]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate chip_id values: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.chips)

    def __iter__(self) -> Iterator[Chip]:
        return iter(self.chips)

    def __getitem__(self, idx: int) -> Chip:
        return self.chips[idx]

    def chip_ids(self) -> list[str]:
        return [c.chip_id for c in self.chips]

    def positives(self) -> list[Chip]:
        return [c for c in self.chips if c.has_landslide]

    def negatives(self) -> list[Chip]:
        return [c for c in self.chips if not c.has_landslide]

    def subset(self, chip_ids: Iterable[str]) -> "ChipSet":
        """Chips with the given ids, kept in this set's order."""
        wanted = set(chip_ids)
        missing = wanted - set(self.chip_ids())
        if missing:
            raise DataError(f"unknown chip_id values: {sorted(missing)[:5]}")
        picked = [c for c in self.chips if c.chip_id in wanted]
        return ChipSet(picked, provenance=self.provenance,
                       pixel_spacing_m=self.pixel_spacing_m)


@dataclass
class SplitManifest:
    """Role assignment for every chip of a source set."""

    assignments: dict[str, str]    # chip_id -> role
    fractions: tuple[float, float, float, float]
    seed: int

    def role_ids(self, role: str) -> list[str]:
        if role not in ROLES:
            raise DataError(f"unknown role {role!r}, expected one of {ROLES}")
        return [cid for cid, r in self.assignments.items() if r == role]

    def counts(self) -> dict[str, int]:
        out = {role: 0 for role in ROLES}
        for r in self.assignments.values():
            out[r] += 1
        return out


# ---------------------------------------------------------------------------
# On-disk format


def _header_path(directory: Path, chip_id: str) -> Path:
    return directory / f"{chip_id}.json"


def _payload_path(directory: Path, chip_id: str) -> Path:
    return directory / f"{chip_id}.bin"


def write_chip(chip: Chip, directory, provenance: str = "") -> Path:
    """Write one chip as <chip_id>.json + <chip_id>.bin, return the header path.

    Payload order is pre[VV], pre[VH], post[VV], post[VH], mask, each a
    row-major little-endian float32 plane (the mask as 0.0/1.0).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "chip_id": chip.chip_id,
        "shape": [len(CHANNEL_NAMES), CHIP_SIZE, CHIP_SIZE],
        "channels": list(CHANNEL_NAMES),
        "has_landslide": bool(chip.has_landslide),
        "provenance": provenance,
    }
    planes = [
        chip.pre[0], chip.pre[1],
        chip.post[0], chip.post[1],
        chip.mask.astype(np.float32),
    ]
    payload = np.concatenate([p.astype("<f4", copy=False).ravel() for p in planes])
    path = _header_path(directory, chip.chip_id)
    path.write_text(json.dumps(header, indent=2) + "\n")
    _payload_path(directory, chip.chip_id).write_bytes(payload.tobytes())
    return path


def read_chip(path) -> Chip:
    """Read a chip from its JSON header path (payload expected alongside)."""
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed chip header {path}: {exc}") from exc
    for key in ("chip_id", "shape", "channels", "has_landslide"):
        if key not in header:
            raise FormatError(f"chip header {path}: missing field {key!r}")
    if header["shape"] != [len(CHANNEL_NAMES), CHIP_SIZE, CHIP_SIZE]:
        raise FormatError(f"chip header {path}: unexpected shape {header['shape']}")
    if header["channels"] != list(CHANNEL_NAMES):
        raise FormatError(f"chip header {path}: unexpected channels {header['channels']}")

    payload_path = path.with_suffix(".bin")
    try:
        raw = payload_path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read chip payload {payload_path}: {exc}") from exc
    plane = CHIP_SIZE * CHIP_SIZE
    expected_bytes = 5 * plane * 4
    if len(raw) != expected_bytes:
        raise FormatError(
            f"chip payload {payload_path}: unexpected end of payload "
            f"(got {len(raw)} bytes, expected {expected_bytes})"
        )
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    pre = flat[0:2 * plane].reshape(2, CHIP_SIZE, CHIP_SIZE)
    post = flat[2 * plane:4 * plane].reshape(2, CHIP_SIZE, CHIP_SIZE)
    mask_f = flat[4 * plane:].reshape(CHIP_SIZE, CHIP_SIZE)
    if not np.isin(mask_f, (0.0, 1.0)).all():
        raise FormatError(f"chip payload {payload_path}: mask not binary")
    return Chip(
        chip_id=header["chip_id"],
        pre=pre,
        post=post,
        mask=mask_f.astype(np.uint8),
        has_landslide=bool(header["has_landslide"]),
    )


def write_chipset(chipset: ChipSet, directory) -> Path:
    """Write every chip plus an index file preserving order and provenance."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for chip in chipset:
        write_chip(chip, directory, provenance=chipset.provenance)
    index = {
        "chip_ids": chipset.chip_ids(),
        "provenance": chipset.provenance,
        "pixel_spacing_m": chipset.pixel_spacing_m,
    }
    index_path = directory / _CHIPSET_INDEX
    index_path.write_text(json.dumps(index, indent=2) + "\n")
    return index_path


def read_chipset(directory) -> ChipSet:
    directory = Path(directory)
    index_path = directory / _CHIPSET_INDEX
    try:
        index = json.loads(index_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed chipset index {index_path}: {exc}") from exc
    chips = [read_chip(_header_path(directory, cid)) for cid in index["chip_ids"]]
    return ChipSet(chips, provenance=index.get("provenance", ""),
                   pixel_spacing_m=index.get("pixel_spacing_m", PIXEL_SPACING_M))


# ---------------------------------------------------------------------------
# Extraction from rasters


def _as_channels(raster: np.ndarray, name: str) -> np.ndarray:
    """Promote a raster to (2, H, W): 2D inputs are duplicated across channels."""
    arr = np.asarray(raster, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr, arr])
    if arr.ndim != 3 or arr.shape[0] != len(CHANNEL_NAMES):
        raise DataError(
            f"{name} raster must be (H, W) or ({len(CHANNEL_NAMES)}, H, W), "
            f"got shape {np.asarray(raster).shape}"
        )
    return arr


def extract_chips_from_raster(pre_raster, post_raster, label_raster,
                              chip_size: int = CHIP_SIZE,
                              stride: int | None = None,
                              id_prefix: str = "chip") -> ChipSet:
    """Cut aligned rasters into chips on a regular grid.

    Windows are half-open [start, start + chip_size); windows that would run
    past the raster edge are dropped.  stride defaults to chip_size
    (non-overlapping tiling).
    """
    if stride is None:
        stride = chip_size
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    pre = _as_channels(pre_raster, "pre")
    post = _as_channels(post_raster, "post")
    labels = np.asarray(label_raster)
    if labels.ndim != 2:
        raise DataError(f"label raster must be 2D, got shape {labels.shape}")
    if pre.shape != post.shape or pre.shape[1:] != labels.shape:
        raise DataError(
            f"raster shapes disagree: pre {pre.shape}, post {post.shape}, "
            f"labels {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all():
        raise DataError("label raster not binary")

    height, width = labels.shape
    chips = []
    for r0 in range(0, height - chip_size + 1, stride):
        for c0 in range(0, width - chip_size + 1, stride):
            window_mask = labels[r0:r0 + chip_size, c0:c0 + chip_size].astype(np.uint8)
            chips.append(Chip(
                chip_id=f"{id_prefix}-r{r0:05d}-c{c0:05d}",
                pre=np.ascontiguousarray(pre[:, r0:r0 + chip_size, c0:c0 + chip_size]),
                post=np.ascontiguousarray(post[:, r0:r0 + chip_size, c0:c0 + chip_size]),
                mask=window_mask,
                has_landslide=bool(window_mask.sum() > 0),
            ))
    return ChipSet(chips, provenance=f"raster({height}x{width}, stride={stride})")


def flags_from_point_labels(points: Sequence[tuple[int, int]],
                            windows: Sequence[tuple[int, int, int, int]]) -> list[bool]:
    """Chip-level flags from landslide centroid points.

    windows are (row0, col0, row1, col1), half-open on the upper bounds; a
    flag is true when at least one point falls inside the window.
    """
    flags = []
    for (r0, c0, r1, c1) in windows:
        hit = any(r0 <= r < r1 and c0 <= c < c1 for (r, c) in points)
        flags.append(hit)
    return flags


# ---------------------------------------------------------------------------
# Balancing and splitting


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def balance_chipset(chipset: ChipSet, target_fraction: float = 0.5,
                    seed: int = 0) -> ChipSet:
    """Discard chips from the over-represented class to hit target_fraction.

    Only the majority class loses chips; survivors keep their original
    relative order and the discard choice is a pure function of seed.
    """
    if not 0.0 <= target_fraction <= 1.0:
        raise DataError(f"target_fraction must be in [0, 1], got {target_fraction}")
    pos_idx = [i for i, c in enumerate(chipset) if c.has_landslide]
    neg_idx = [i for i, c in enumerate(chipset) if not c.has_landslide]
    n_pos, n_neg = len(pos_idx), len(neg_idx)
    total = n_pos + n_neg
    if total == 0:
        raise DataError("cannot balance an empty chip set")
    if target_fraction > 0 and n_pos == 0:
        raise DataError(
            f"target fraction {target_fraction} unreachable: no positive chips "
            "to keep and balancing only discards"
        )
    if target_fraction < 1 and n_neg == 0 and n_pos > 0 and target_fraction > 0:
        raise DataError(
            f"target fraction {target_fraction} unreachable: no negative chips "
            "to keep and balancing only discards"
        )

    current = n_pos / total
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if current > target_fraction:
        # Positives over-represented: keep all negatives, thin positives.
        keep_pos = min(n_pos, _round_half_up(
            target_fraction * n_neg / (1.0 - target_fraction)
        )) if target_fraction < 1.0 else n_pos
        drop = set(rng.choice(len(pos_idx), size=n_pos - keep_pos, replace=False))
        keep = set(neg_idx) | {p for j, p in enumerate(pos_idx) if j not in drop}
    elif current < target_fraction:
        # Negatives over-represented: keep all positives, thin negatives.
        keep_neg = min(n_neg, _round_half_up(
            (1.0 - target_fraction) * n_pos / target_fraction
        )) if target_fraction > 0.0 else 0
        drop = set(rng.choice(len(neg_idx), size=n_neg - keep_neg, replace=False))
        keep = set(pos_idx) | {n for j, n in enumerate(neg_idx) if j not in drop}
    else:
        keep = set(pos_idx) | set(neg_idx)

    survivors = [c for i, c in enumerate(chipset) if i in keep]
    return ChipSet(survivors, provenance=chipset.provenance,
                   pixel_spacing_m=chipset.pixel_spacing_m)


def largest_remainder_allocation(fractions: Sequence[float], total: int) -> list[int]:
    """Integer allocation of total across fractions (Hamilton's method).

    Floor every quota, then hand remaining units to the largest fractional
    remainders; remainder ties go to the earlier position.
    """
    quotas = [f * total for f in fractions]
    base = [int(np.floor(q)) for q in quotas]
    leftover = total - sum(base)
    remainders = sorted(
        range(len(fractions)),
        key=lambda k: (-(quotas[k] - base[k]), k),
    )
    for k in remainders[:leftover]:
        base[k] += 1
    return base


def split_chipset(chipset: ChipSet, fractions: Sequence[float],
                  seed: int = 0) -> SplitManifest:
    """Assign every chip to one of four roles, keeping each role balanced.

    Role totals follow the largest-remainder allocation of fractions x N;
    positives get their own largest-remainder allocation on the positive
    count, and negatives fill the rest, so each role stays within one chip
    of the source class balance.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(ROLES):
        raise DataError(f"expected {len(ROLES)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise DataError(f"fractions must be nonnegative, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got sum {sum(fractions)!r}")

    pos_ids = [c.chip_id for c in chipset if c.has_landslide]
    neg_ids = [c.chip_id for c in chipset if not c.has_landslide]
    totals = largest_remainder_allocation(fractions, len(chipset))
    pos_counts = largest_remainder_allocation(fractions, len(pos_ids))
    neg_counts = [t - p for t, p in zip(totals, pos_counts)]
    if any(n < 0 for n in neg_counts) or sum(neg_counts) != len(neg_ids):
        raise DataError(
            f"cannot balance split: role totals {totals} vs positive "
            f"allocation {pos_counts} with {len(neg_ids)} negatives"
        )

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pos_order = [pos_ids[i] for i in rng.permutation(len(pos_ids))]
    neg_order = [neg_ids[i] for i in rng.permutation(len(neg_ids))]

    role_of = {}
    p0 = n0 = 0
    for role, p_count, n_count in zip(ROLES, pos_counts, neg_counts):
        for cid in pos_order[p0:p0 + p_count]:
            role_of[cid] = role
        for cid in neg_order[n0:n0 + n_count]:
            role_of[cid] = role
        p0 += p_count
        n0 += n_count

    # Record assignments in source order so the manifest is stable.
    assignments = {c.chip_id: role_of[c.chip_id] for c in chipset}
    return SplitManifest(assignments=assignments, fractions=fractions, seed=seed)


def write_split_manifest(manifest: SplitManifest, csv_path) -> Path:
    """Write assignments as CSV plus a JSON footer with fractions and seed."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chip_id", "role"])
        for cid, role in manifest.assignments.items():
            writer.writerow([cid, role])
    footer = {"fractions": list(manifest.fractions), "seed": manifest.seed}
    csv_path.with_suffix(".json").write_text(json.dumps(footer, indent=2) + "\n")
    return csv_path


def read_split_manifest(csv_path) -> SplitManifest:
    csv_path = Path(csv_path)
    try:
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read split manifest {csv_path}: {exc}") from exc
    if not rows or rows[0] != ["chip_id", "role"]:
        raise FormatError(f"split manifest {csv_path}: bad or missing header row")
    assignments = {}
    for row in rows[1:]:
        if len(row) != 2:
            raise FormatError(f"split manifest {csv_path}: malformed row {row!r}")
        cid, role = row
        if role not in ROLES:
            raise FormatError(f"split manifest {csv_path}: unknown role {role!r}")
        if cid in assignments:
            raise FormatError(f"split manifest {csv_path}: duplicate chip_id {cid!r}")
        assignments[cid] = role
    try:
        footer = json.loads(csv_path.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed split footer for {csv_path}: {exc}") from exc
    return SplitManifest(
        assignments=assignments,
        fractions=tuple(footer["fractions"]),
        seed=int(footer["seed"]),
    )


# ---------------------------------------------------------------------------
# Preprocessing


def average_revisits(images: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of repeat-pass acquisitions (speckle reduction)."""
    if len(images) == 0:
        raise DataError("average_revisits needs at least one image")
    first = np.asarray(images[0])
    for img in images[1:]:
        if np.asarray(img).shape != first.shape:
            raise DataError(
                f"revisit shapes disagree: {first.shape} vs {np.asarray(img).shape}"
            )
    return np.mean(np.stack([np.asarray(img) for img in images]), axis=0)


def db_transform(x: np.ndarray) -> np.ndarray:
    """Amplitude to decibels with a floor so zeros stay finite."""
    return 10.0 * np.log10(np.maximum(x, AMPLITUDE_FLOOR))


@dataclass
class NormalizationStats:
    """Per-channel mean/std of dB amplitudes, fit once on the pretraining split."""

    mean_db: np.ndarray  # (2,) float64
    std_db: np.ndarray   # (2,) float64

    def to_json(self) -> dict:
        return {"mean_db": self.mean_db.tolist(), "std_db": self.std_db.tolist()}

    @classmethod
    def from_json(cls, payload: dict) -> "NormalizationStats":
        return cls(
            mean_db=np.asarray(payload["mean_db"], dtype=np.float64),
            std_db=np.asarray(payload["std_db"], dtype=np.float64),
        )


def compute_normalization_stats(chipset: ChipSet) -> NormalizationStats:
    """Per-channel dB mean/std over pre and post images of the given chips."""
    if len(chipset) == 0:
        raise DataError("cannot compute normalization stats from an empty chip set")
    n_ch = len(CHANNEL_NAMES)
    mean = np.zeros(n_ch)
    std = np.zeros(n_ch)
    for ch in range(n_ch):
        vals = np.concatenate([
            np.stack([db_transform(c.pre[ch]) for c in chipset]).ravel(),
            np.stack([db_transform(c.post[ch]) for c in chipset]).ravel(),
        ]).astype(np.float64)
        mean[ch] = vals.mean()
        std[ch] = vals.std()
        if std[ch] < 1e-12:
            raise DataError(
                f"zero std in channel {CHANNEL_NAMES[ch]}: cannot standardize "
                "a constant channel"
            )
    return NormalizationStats(mean_db=mean, std_db=std)


def normalize_chipset(chipset: ChipSet,
                      stats: NormalizationStats | None = None
                      ) -> tuple[ChipSet, NormalizationStats]:
    """dB-transform and standardize every chip; fit stats here if not given.

    Stats are meant to be fit on the pretraining split and reused for every
    other split so no information leaks across roles.
    """
    if stats is None:
        stats = compute_normalization_stats(chipset)
    mean = stats.mean_db.reshape(-1, 1, 1)
    std = stats.std_db.reshape(-1, 1, 1)
    if np.any(stats.std_db < 1e-12):
        raise DataError("zero std in normalization stats")
    out = []
    for chip in chipset:
        out.append(Chip(
            chip_id=chip.chip_id,
            pre=((db_transform(chip.pre) - mean) / std).astype(np.float32),
            post=((db_transform(chip.post) - mean) / std).astype(np.float32),
            mask=chip.mask.copy(),
            has_landslide=chip.has_landslide,
        ))
    return ChipSet(out, provenance=chipset.provenance,
                   pixel_spacing_m=chipset.pixel_spacing_m), stats
