"""Chip model, on-disk format, extraction, balancing, splitting, normalization."""

import json

import numpy as np
import pytest

from _helpers import make_chip, make_flagged_chipset, random_chip
from sarslide.chips import (
    AMPLITUDE_FLOOR,
    CHIP_SIZE,
    ROLES,
    Chip,
    ChipSet,
    average_revisits,
    balance_chipset,
    compute_normalization_stats,
    db_transform,
    extract_chips_from_raster,
    flags_from_point_labels,
    largest_remainder_allocation,
    normalize_chipset,
    read_chip,
    read_chipset,
    read_split_manifest,
    split_chipset,
    write_chip,
    write_chipset,
    write_split_manifest,
)
from sarslide.errors import DataError, FormatError


# ---------------------------------------------------------------------------
# Chip validation


def test_chip_rejects_wrong_shapes():
    good = random_chip(np.random.default_rng(0), "a")
    with pytest.raises(DataError, match="shape"):
        Chip("b", good.pre[:, :64], good.post, good.mask, good.has_landslide)
    with pytest.raises(DataError, match="mask"):
        Chip("c", good.pre, good.post, good.mask[:64], good.has_landslide)


def test_chip_rejects_nonbinary_mask_and_flag_mismatch():
    good = random_chip(np.random.default_rng(1), "a")
    bad_mask = good.mask.copy()
    bad_mask[0, 0] = 2
    with pytest.raises(FormatError, match="mask not binary"):
        Chip("b", good.pre, good.post, bad_mask, True)
    with pytest.raises(DataError, match="has_landslide"):
        Chip("c", good.pre, good.post, np.zeros_like(good.mask), True)


def test_chip_rejects_nonfinite():
    good = random_chip(np.random.default_rng(2), "a")
    bad = good.pre.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(DataError, match="finite"):
        Chip("b", bad, good.post, good.mask, good.has_landslide)


def test_chipset_rejects_duplicate_ids():
    chips = [make_chip("same", True), make_chip("same", False)]
    with pytest.raises(DataError, match="duplicate"):
        ChipSet(chips)


# ---------------------------------------------------------------------------
# On-disk format


def test_chip_round_trip_bitwise_100_random(tmp_path):
    rng = np.random.default_rng(42)
    for i in range(100):
        chip = random_chip(rng, f"rt-{i:03d}")
        path = write_chip(chip, tmp_path)
        back = read_chip(path)
        assert back.chip_id == chip.chip_id
        assert back.has_landslide == chip.has_landslide
        assert back.pre.tobytes() == chip.pre.tobytes()
        assert back.post.tobytes() == chip.post.tobytes()
        assert np.array_equal(back.mask, chip.mask)


def test_read_chip_rejects_nonbinary_mask_payload(tmp_path):
    chip = random_chip(np.random.default_rng(3), "badmask")
    write_chip(chip, tmp_path)
    payload = tmp_path / "badmask.bin"
    raw = bytearray(payload.read_bytes())
    # Overwrite the first mask float with 2.0.
    plane = CHIP_SIZE * CHIP_SIZE
    raw[4 * plane * 4:4 * plane * 4 + 4] = np.float32(2.0).tobytes()
    payload.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="mask not binary"):
        read_chip(tmp_path / "badmask.json")


def test_read_chip_rejects_truncated_payload(tmp_path):
    chip = random_chip(np.random.default_rng(4), "short")
    write_chip(chip, tmp_path)
    payload = tmp_path / "short.bin"
    raw = payload.read_bytes()
    payload.write_bytes(raw[:-100])
    with pytest.raises(FormatError, match="unexpected end of payload"):
        read_chip(tmp_path / "short.json")


def test_read_chip_rejects_malformed_header(tmp_path):
    chip = random_chip(np.random.default_rng(5), "hdr")
    write_chip(chip, tmp_path)
    header = tmp_path / "hdr.json"
    header.write_text("{not json")
    with pytest.raises(FormatError, match="malformed"):
        read_chip(header)
    payload = json.loads((write_chip(chip, tmp_path)).read_text())
    del payload["shape"]
    header.write_text(json.dumps(payload))
    with pytest.raises(FormatError, match="shape"):
        read_chip(header)


def test_chipset_round_trip_preserves_order_and_provenance(tmp_path):
    rng = np.random.default_rng(6)
    chips = [random_chip(rng, f"c-{i}") for i in range(7)]
    original = ChipSet(chips, provenance="unit-test-set")
    write_chipset(original, tmp_path)
    back = read_chipset(tmp_path)
    assert back.chip_ids() == original.chip_ids()
    assert back.provenance == "unit-test-set"
    assert back.pixel_spacing_m == original.pixel_spacing_m
    for a, b in zip(original, back):
        assert a.pre.tobytes() == b.pre.tobytes()


# ---------------------------------------------------------------------------
# Raster extraction


def test_extract_256_grid_gives_4_chips():
    pre = np.random.default_rng(7).random((2, 256, 256))
    labels = np.zeros((256, 256), dtype=np.uint8)
    out = extract_chips_from_raster(pre, pre, labels, stride=128)
    assert len(out) == 4
    assert all(not c.has_landslide for c in out)


def test_extract_drops_partial_edge_windows():
    pre = np.random.default_rng(8).random((300, 300))
    labels = np.zeros((300, 300), dtype=np.uint8)
    out = extract_chips_from_raster(pre, pre, labels, stride=128)
    assert len(out) == 4


def test_extract_overlapping_stride():
    pre = np.random.default_rng(9).random((256, 256))
    labels = np.zeros((256, 256), dtype=np.uint8)
    labels[0:10, 0:10] = 1
    out = extract_chips_from_raster(pre, pre, labels, stride=64)
    # Starts at 0, 64, 128 in each axis.
    assert len(out) == 9
    flagged = [c for c in out if c.has_landslide]
    assert len(flagged) == 1 and flagged[0].chip_id.endswith("r00000-c00000")


def test_extract_rejects_bad_inputs():
    pre = np.zeros((2, 256, 256))
    labels = np.zeros((256, 256), dtype=np.uint8)
    with pytest.raises(DataError, match="shapes disagree"):
        extract_chips_from_raster(pre, np.zeros((2, 128, 256)), labels)
    bad_labels = labels.copy()
    bad_labels[0, 0] = 3
    with pytest.raises(DataError, match="not binary"):
        extract_chips_from_raster(pre, pre, bad_labels)
    with pytest.raises(DataError, match="stride"):
        extract_chips_from_raster(pre, pre, labels, stride=0)


def test_flags_from_point_labels_boundary():
    windows = [(0, 0, 128, 128), (128, 0, 256, 128)]
    assert flags_from_point_labels([(5, 5)], windows) == [True, False]
    # Exclusive upper bound on rows: (128, 0) misses the first window.
    assert flags_from_point_labels([(128, 0)], windows) == [False, True]
    assert flags_from_point_labels([], windows) == [False, False]


# ---------------------------------------------------------------------------
# Balancing


def test_balance_discards_negatives():
    out = balance_chipset(make_flagged_chipset(40, 60), 0.5, seed=0)
    assert len(out.positives()) == 40 and len(out.negatives()) == 40


def test_balance_identity_when_already_balanced():
    src = make_flagged_chipset(50, 50)
    out = balance_chipset(src, 0.5, seed=0)
    assert out.chip_ids() == src.chip_ids()


def test_balance_discards_positives_when_over_represented():
    out = balance_chipset(make_flagged_chipset(60, 40), 0.5, seed=0)
    assert len(out.positives()) == 40 and len(out.negatives()) == 40


def test_balance_deterministic_and_order_preserving():
    src = make_flagged_chipset(30, 70)
    a = balance_chipset(src, 0.5, seed=9)
    b = balance_chipset(src, 0.5, seed=9)
    assert a.chip_ids() == b.chip_ids()
    c = balance_chipset(src, 0.5, seed=10)
    assert a.chip_ids() != c.chip_ids()
    # Survivors keep source order.
    order = {cid: i for i, cid in enumerate(src.chip_ids())}
    positions = [order[cid] for cid in a.chip_ids()]
    assert positions == sorted(positions)


def test_balance_unreachable_targets():
    with pytest.raises(DataError, match="unreachable"):
        balance_chipset(make_flagged_chipset(0, 10), 0.5, seed=0)
    with pytest.raises(DataError, match="unreachable"):
        balance_chipset(make_flagged_chipset(10, 0), 0.5, seed=0)


def test_balance_off_half_target():
    out = balance_chipset(make_flagged_chipset(50, 50), 0.25, seed=1)
    frac = len(out.positives()) / len(out)
    assert abs(len(out.positives()) - 0.25 * len(out)) <= 1.0
    assert abs(frac - 0.25) < 0.02


# ---------------------------------------------------------------------------
# Splitting (allocation oracle enumerated by hand)


def test_largest_remainder_basics():
    assert largest_remainder_allocation([0.5, 0.25, 0.125, 0.125], 552) == \
        [276, 138, 69, 69]
    assert largest_remainder_allocation([0.75, 0.0, 0.125, 0.125], 2174) == \
        [1630, 0, 272, 272]
    # Tie on remainders goes to the earlier position.
    assert largest_remainder_allocation([0.5, 0.25, 0.125, 0.125], 4) == \
        [2, 1, 1, 0]


def test_split_counts_conflict_free_partition_large():
    src = make_flagged_chipset(1087, 1087)
    manifest = split_chipset(src, (0.75, 0.0, 0.125, 0.125), seed=3)
    counts = manifest.counts()
    assert [counts[r] for r in ROLES] == [1630, 0, 272, 272]
    assert sorted(manifest.assignments) == sorted(src.chip_ids())


def test_split_counts_552():
    src = make_flagged_chipset(276, 276)
    manifest = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=3)
    counts = manifest.counts()
    assert [counts[r] for r in ROLES] == [276, 138, 69, 69]


def test_split_8_chip_hand_enumeration():
    src = make_flagged_chipset(4, 4)
    manifest = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=0)
    counts = manifest.counts()
    assert [counts[r] for r in ROLES] == [4, 2, 1, 1]
    pos = {cid for cid in manifest.assignments if cid.startswith("pos")}
    by_role = {r: [cid for cid, rr in manifest.assignments.items() if rr == r]
               for r in ROLES}
    assert sum(1 for cid in by_role["pretrain"] if cid in pos) == 2
    assert sum(1 for cid in by_role["seg_train"] if cid in pos) == 1
    assert sum(1 for cid in by_role["validation"] if cid in pos) == 1
    assert sum(1 for cid in by_role["test"] if cid in pos) == 0


def test_split_role_balance_within_one_chip():
    src = make_flagged_chipset(138, 138)
    manifest = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=11)
    for role in ROLES:
        ids = manifest.role_ids(role)
        if not ids:
            continue
        n_pos = sum(1 for cid in ids if cid.startswith("pos"))
        assert abs(n_pos - len(ids) / 2) <= 0.5 + 1e-9


def test_split_deterministic_in_seed():
    src = make_flagged_chipset(40, 40)
    a = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=5)
    b = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=5)
    c = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=6)
    assert a.assignments == b.assignments
    assert a.assignments != c.assignments


def test_split_rejects_bad_fractions():
    src = make_flagged_chipset(4, 4)
    with pytest.raises(DataError, match="sum to 1"):
        split_chipset(src, (0.5, 0.25, 0.125, 0.1), seed=0)
    with pytest.raises(DataError, match="nonnegative"):
        split_chipset(src, (1.5, -0.5, 0.0, 0.0), seed=0)


def test_split_manifest_round_trip(tmp_path):
    src = make_flagged_chipset(10, 10)
    manifest = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=2)
    path = write_split_manifest(manifest, tmp_path / "split.csv")
    back = read_split_manifest(path)
    assert back.assignments == manifest.assignments
    assert back.fractions == manifest.fractions
    assert back.seed == manifest.seed


def test_split_manifest_rejects_corruption(tmp_path):
    src = make_flagged_chipset(4, 4)
    manifest = split_chipset(src, (0.5, 0.25, 0.125, 0.125), seed=2)
    path = write_split_manifest(manifest, tmp_path / "split.csv")
    text = path.read_text().replace("pretrain", "nonsense", 1)
    path.write_text(text)
    with pytest.raises(FormatError, match="unknown role"):
        read_split_manifest(path)


# ---------------------------------------------------------------------------
# Revisit averaging and normalization


def test_average_revisits_identity_and_mean():
    img = np.random.default_rng(12).random((2, 16, 16))
    assert np.array_equal(average_revisits([img]), img)
    out = average_revisits([img, 3 * img])
    assert np.allclose(out, 2 * img)


def test_average_revisits_rejects_bad_input():
    with pytest.raises(DataError, match="at least one"):
        average_revisits([])
    with pytest.raises(DataError, match="shapes disagree"):
        average_revisits([np.zeros((4, 4)), np.zeros((5, 4))])


def test_db_transform_floor():
    out = db_transform(np.array([0.0, 1.0, AMPLITUDE_FLOOR]))
    assert out[0] == pytest.approx(10 * np.log10(AMPLITUDE_FLOOR))
    assert out[1] == pytest.approx(0.0)


def test_normalize_zero_std_errors():
    flat = make_flagged_chipset(2, 2)  # constant planes
    with pytest.raises(DataError, match="zero std"):
        normalize_chipset(flat)


def _varied_chipset(n=6):
    rng = np.random.default_rng(13)
    return ChipSet([random_chip(rng, f"v-{i}") for i in range(n)])


def test_normalize_self_stats_gives_unit_moments():
    src = _varied_chipset()
    normed, stats = normalize_chipset(src)
    for ch in range(2):
        vals = np.concatenate([
            np.stack([c.pre[ch] for c in normed]).ravel(),
            np.stack([c.post[ch] for c in normed]).ravel(),
        ])
        assert abs(vals.mean()) < 1e-4
        assert abs(vals.std() - 1.0) < 1e-4
    # Renormalizing with freshly fit stats stays standardized.
    renormed, stats2 = normalize_chipset(normed)
    for ch in range(2):
        vals = np.concatenate([
            np.stack([c.pre[ch] for c in renormed]).ravel(),
            np.stack([c.post[ch] for c in renormed]).ravel(),
        ])
        assert abs(vals.mean()) < 1e-4
        assert abs(vals.std() - 1.0) < 1e-4


def test_normalize_floor_maps_zero_amplitude_to_finite_value():
    src = _varied_chipset()
    zeroed = src[0].pre.copy()
    zeroed[0, 0, 0] = 0.0
    chips = [Chip("z", zeroed, src[0].post, src[0].mask, src[0].has_landslide)]
    chips += list(src.chips)[1:]
    cs = ChipSet(chips)
    normed, stats = normalize_chipset(cs)
    expected = (10 * np.log10(AMPLITUDE_FLOOR) - stats.mean_db[0]) / stats.std_db[0]
    assert normed[0].pre[0, 0, 0] == pytest.approx(expected, rel=1e-5)


def test_normalize_with_external_stats_reuses_them():
    src = _varied_chipset()
    _, stats = normalize_chipset(src)
    other = _varied_chipset(3)
    normed, stats_back = normalize_chipset(other, stats)
    assert stats_back is stats
    ch0 = (db_transform(other[0].pre[0]) - stats.mean_db[0]) / stats.std_db[0]
    assert np.allclose(normed[0].pre[0], ch0.astype(np.float32))
