"""Ablation harness: config parsing, grid protocol, resume, and reports."""

import dataclasses
import json
import types

import numpy as np
import pytest

import sarslide.experiments as experiments
from sarslide.chips import (
    ChipSet,
    normalize_chipset,
    split_chipset,
    write_chipset,
    write_split_manifest,
)
from sarslide.errors import ConfigError, DataError, TrainingError
from sarslide.experiments import (
    ExperimentConfig,
    ResultsTable,
    cell_seed,
    default_seeds_for_size,
    emit_report,
    evaluate_suite,
    read_results_csv,
    run_ablation,
    subsample_training_set,
    write_results_csv,
)
from sarslide.nets import ArchConfig
from sarslide.synth import SyntheticConfig, generate_synthetic_chipset
from sarslide.training import (
    Hyperparams,
    load_checkpoint,
    precompute_embeddings,
    materialize_model,
    pretrain_classifier,
    save_checkpoint,
)
from _helpers import make_flagged_chipset

ARCH_PAYLOAD = {"embedding_channels": 4, "encoder_depth": 3, "base_channels": 4,
                "blocks_per_stage": [1, 1, 1], "head_hidden": 8,
                "seg_channels": [4, 4, 4], "seg_fusion_channels": 8}
HYPER_PAYLOAD = {"learning_rate": 0.01, "batch_size": 4, "max_epochs": 5,
                 "patience_epochs": 5, "top_k_checkpoints": 5}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation_ws")
    full = generate_synthetic_chipset(
        SyntheticConfig(n_chips=30, seed=21, looks=32, contrast=4.0))
    chips_dir = root / "chips"
    write_chipset(full, chips_dir)
    manifest = split_chipset(full, (0.2, 0.4, 0.2, 0.2), seed=0)
    manifest_path = write_split_manifest(manifest, root / "split.csv")

    arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in ARCH_PAYLOAD.items()})
    pretrain_chips, stats = normalize_chipset(
        full.subset(manifest.role_ids("pretrain")))
    val_chips, _ = normalize_chipset(
        full.subset(manifest.role_ids("validation")), stats)
    hyper = Hyperparams(learning_rate=0.01, batch_size=3, max_epochs=3,
                        patience_epochs=3, seed=1)
    classifier = pretrain_classifier(pretrain_chips, val_chips, arch, hyper)[0]
    ckpt_path = save_checkpoint(classifier, root / "classifier")

    payload = {
        "train_sizes": [2, 3],
        "seeds_per_size": {"2": 2, "3": 1},
        "variants": {"none": None, "pretrained": str(ckpt_path)},
        "hyper": dict(HYPER_PAYLOAD),
        "arch": dict(ARCH_PAYLOAD),
        "data": {"chips_dir": str(chips_dir),
                 "split_manifest": str(manifest_path)},
        "output_dir": str(root / "out"),
        "base_seed": 7,
    }
    config = ExperimentConfig.from_json(payload)
    table = run_ablation(config)
    return types.SimpleNamespace(root=root, payload=payload, config=config,
                                 table=table, outdir=root / "out",
                                 classifier_path=ckpt_path)


# ---------------------------------------------------------------------------
# Configuration


def test_config_defaults():
    payload = {"variants": {"none": None},
               "data": {"chips_dir": "c", "split_manifest": "m"},
               "output_dir": "o"}
    config = ExperimentConfig.from_json(payload)
    assert config.train_sizes == [2, 5, 10, 20, 110]
    assert config.seeds_per_size == {2: 5, 5: 3, 10: 3, 20: 3, 110: 3}
    assert default_seeds_for_size(2) == 5 and default_seeds_for_size(110) == 3
    assert config.hyper == Hyperparams()
    assert config.base_seed == 100
    round_tripped = ExperimentConfig.from_json(config.to_json())
    assert round_tripped == config


def test_config_rejects_unknown_and_missing_keys():
    base = {"variants": {"none": None},
            "data": {"chips_dir": "c", "split_manifest": "m"},
            "output_dir": "o"}
    with pytest.raises(ConfigError, match="unknown experiment config"):
        ExperimentConfig.from_json({**base, "surprise": 1})
    with pytest.raises(ConfigError, match="unknown hyper"):
        ExperimentConfig.from_json({**base, "hyper": {"momentum": 0.9}})
    with pytest.raises(ConfigError, match="unknown arch"):
        ExperimentConfig.from_json({**base, "arch": {"layers": 3}})
    with pytest.raises(ConfigError, match="unknown data"):
        ExperimentConfig.from_json(
            {**base, "data": {**base["data"], "cache": "x"}})
    with pytest.raises(ConfigError, match="missing 'variants'"):
        ExperimentConfig.from_json(
            {"data": base["data"], "output_dir": "o"})
    with pytest.raises(ConfigError, match="missing 'split_manifest'"):
        ExperimentConfig.from_json(
            {**base, "data": {"chips_dir": "c"}})


def test_config_semantic_validation():
    base = {"variants": {"none": None},
            "data": {"chips_dir": "c", "split_manifest": "m"},
            "output_dir": "o"}
    with pytest.raises(ConfigError, match="pretrained checkpoint path"):
        ExperimentConfig.from_json({**base, "variants": {"fused": None}})
    with pytest.raises(ConfigError, match="not in train_sizes"):
        ExperimentConfig.from_json(
            {**base, "train_sizes": [2], "seeds_per_size": {"9": 3}})
    with pytest.raises(ConfigError, match="duplicate"):
        ExperimentConfig.from_json({**base, "train_sizes": [2, 2]})
    with pytest.raises(ConfigError, match="top_k"):
        ExperimentConfig.from_json(
            {**base, "hyper": {"max_epochs": 3, "patience_epochs": 2}})


def test_cell_seed_is_stable_and_distinct():
    assert cell_seed(100, 5, 2) == 100 + 5000 + 2
    seen = {cell_seed(7, size, idx)
            for size in (2, 5, 10, 20, 110) for idx in range(5)}
    assert len(seen) == 25


# ---------------------------------------------------------------------------
# Subsampling


def test_subsample_identity_and_determinism():
    chipset = make_flagged_chipset(n_pos=55, n_neg=55)
    whole = subsample_training_set(chipset, len(chipset), seed=3)
    assert whole.chip_ids() == chipset.chip_ids()
    a = subsample_training_set(chipset, 10, seed=3)
    b = subsample_training_set(chipset, 10, seed=3)
    assert a.chip_ids() == b.chip_ids()
    # Source order is preserved in the subset.
    order = {cid: i for i, cid in enumerate(chipset.chip_ids())}
    positions = [order[cid] for cid in a.chip_ids()]
    assert positions == sorted(positions)


def test_subsample_seeds_differ():
    chipset = make_flagged_chipset(n_pos=55, n_neg=55)
    picks = {tuple(subsample_training_set(chipset, 2, seed=s).chip_ids())
             for s in range(10)}
    assert len(picks) > 1


def test_subsample_rejects_bad_sizes():
    chipset = make_flagged_chipset(n_pos=3, n_neg=3)
    with pytest.raises(DataError, match="outside"):
        subsample_training_set(chipset, 0, seed=0)
    with pytest.raises(DataError, match="outside"):
        subsample_training_set(chipset, 7, seed=0)
    with pytest.raises(DataError, match="int"):
        subsample_training_set(chipset, 2.5, seed=0)


# ---------------------------------------------------------------------------
# The ablation grid


def test_ablation_grid_and_inventory(workspace):
    table = workspace.table
    assert [(r.variant, r.train_size) for r in table.rows] == [
        ("none", 2), ("none", 3), ("pretrained", 2), ("pretrained", 3)]
    assert table.failures == []
    for row in table.rows:
        seeds = workspace.config.seeds_per_size[row.train_size]
        assert row.checkpoint_count == seeds * 5
        assert row.report.n_runs == seeds * 5
        assert 0.0 <= row.report.aprc <= 1.0
    # Each cell directory holds the full artifact set.
    cell = workspace.outdir / "none" / "2" / "0"
    names = {p.name for p in cell.iterdir()}
    assert {"done.marker", "metrics.json", "mean_probs.npy",
            "train_log.json"} <= names
    assert sum(1 for n in names if n.startswith("checkpoint_")
               and n.endswith(".bin")) == 5


def test_ablation_rerun_is_noop(workspace):
    probe = workspace.outdir / "pretrained" / "3" / "0" / "checkpoint_0.bin"
    stamp = probe.stat().st_mtime_ns
    table2 = run_ablation(workspace.config)
    assert probe.stat().st_mtime_ns == stamp
    assert table2.rows == workspace.table.rows


def test_ablation_report_files(workspace):
    assert (workspace.outdir / "results.csv").exists()
    report = workspace.outdir / "report"
    assert sorted(p.name for p in report.glob("*.png")) == [
        "aprc_vs_train_size.png", "count_error_all_chips.png",
        "count_error_empty_chips.png", "count_error_landslide_chips.png"]
    provenance = json.loads((workspace.outdir / "provenance.json").read_text())
    assert provenance["config"] == workspace.config.to_json()
    assert provenance["seeds"]["2"] == [cell_seed(7, 2, 0), cell_seed(7, 2, 1)]
    assert provenance["failures"] == []
    assert provenance["incomplete_rows"] == []
    assert "timestamp" not in provenance
    assert len(provenance["config_sha256"]) == 64


def test_results_csv_round_trip(workspace, tmp_path):
    parsed = read_results_csv(workspace.outdir / "results.csv")
    assert parsed.rows == workspace.table.rows
    rewritten = write_results_csv(parsed, tmp_path / "again.csv")
    assert rewritten.read_text() == (workspace.outdir / "results.csv").read_text()


def test_results_csv_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        read_results_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("who,what\n")
    with pytest.raises(DataError, match="header"):
        read_results_csv(bad)
    header = ",".join(experiments._CSV_COLUMNS)
    bad.write_text(header + "\nnone,2,0.5\n")
    with pytest.raises(DataError, match="malformed"):
        read_results_csv(bad)


def test_oversized_train_size_rejected(workspace, tmp_path):
    payload = json.loads(json.dumps(workspace.payload))
    payload["train_sizes"] = [400]
    payload["seeds_per_size"] = {}
    payload["output_dir"] = str(tmp_path / "out")
    with pytest.raises(DataError, match="exceed"):
        run_ablation(ExperimentConfig.from_json(payload))


def test_failed_cell_recorded_then_retried(workspace, tmp_path, monkeypatch):
    payload = json.loads(json.dumps(workspace.payload))
    payload["variants"] = {"none": None}
    payload["seeds_per_size"] = {"2": 1, "3": 1}
    payload["output_dir"] = str(tmp_path / "out")
    config = ExperimentConfig.from_json(payload)

    real = experiments.train_segmenter

    def sabotaged(train, val, pretrained, arch, hyper, log_path=None):
        if len(train) == 3:
            raise TrainingError("injected failure")
        return real(train, val, pretrained, arch, hyper, log_path=log_path)

    monkeypatch.setattr(experiments, "train_segmenter", sabotaged)
    table = run_ablation(config)
    assert [(r.variant, r.train_size) for r in table.rows] == [("none", 2)]
    assert table.failures == [{"variant": "none", "train_size": 3,
                               "seed_index": 0, "error": "injected failure"}]
    provenance = json.loads((tmp_path / "out" / "provenance.json").read_text())
    assert provenance["incomplete_rows"] == [{"variant": "none", "train_size": 3}]
    assert not (tmp_path / "out" / "none" / "3" / "0" / "done.marker").exists()

    monkeypatch.undo()
    table2 = run_ablation(config)  # failed cell is retried, grid completes
    assert [(r.variant, r.train_size) for r in table2.rows] == [
        ("none", 2), ("none", 3)]
    assert table2.failures == []


# ---------------------------------------------------------------------------
# Evaluation suite


def _load_cell_checkpoints(workspace, variant, size, seed_index):
    cdir = workspace.outdir / variant / str(size) / str(seed_index)
    return [load_checkpoint(cdir / f"checkpoint_{r}") for r in range(5)]


def _normalized_test_set(workspace):
    from sarslide.chips import read_chipset, read_split_manifest, \
        compute_normalization_stats
    chips = read_chipset(workspace.payload["data"]["chips_dir"])
    manifest = read_split_manifest(workspace.payload["data"]["split_manifest"])
    stats = compute_normalization_stats(
        chips.subset(manifest.role_ids("pretrain")))
    normalized, _ = normalize_chipset(chips, stats)
    return normalized.subset(manifest.role_ids("test"))


def test_evaluate_suite_deterministic(workspace):
    checkpoints = _load_cell_checkpoints(workspace, "none", 3, 0)
    test_set = _normalized_test_set(workspace)
    a = evaluate_suite(checkpoints, test_set)
    b = evaluate_suite(checkpoints, test_set)
    assert np.array_equal(a.mean_probs, b.mean_probs)
    assert a.checkpoint_aprcs == b.checkpoint_aprcs
    assert a.chip_records == b.chip_records
    # The stored cell artifacts came from the same pure function.
    stored = np.load(workspace.outdir / "none" / "3" / "0" / "mean_probs.npy")
    assert np.allclose(a.mean_probs, stored, atol=1e-12)


def test_evaluate_suite_detects_leakage(workspace):
    checkpoints = _load_cell_checkpoints(workspace, "none", 3, 0)
    test_set = _normalized_test_set(workspace)
    leaked_id = test_set.chip_ids()[0]
    checkpoints[2].train_chip_ids = [leaked_id] + checkpoints[2].train_chip_ids
    with pytest.raises(DataError, match=leaked_id):
        evaluate_suite(checkpoints, test_set)


def test_evaluate_suite_input_errors(workspace):
    checkpoints = _load_cell_checkpoints(workspace, "none", 3, 0)
    test_set = _normalized_test_set(workspace)
    with pytest.raises(DataError, match="empty test split"):
        evaluate_suite(checkpoints, ChipSet([]))
    with pytest.raises(DataError, match="no checkpoints"):
        evaluate_suite([], test_set)
    fused = _load_cell_checkpoints(workspace, "pretrained", 3, 0)
    with pytest.raises(DataError, match="mixed"):
        evaluate_suite([checkpoints[0], fused[0]], test_set)
    with pytest.raises(DataError, match="frozen"):
        evaluate_suite(fused, test_set)


def test_evaluate_suite_with_frozen_embeddings(workspace):
    fused = _load_cell_checkpoints(workspace, "pretrained", 3, 0)
    test_set = _normalized_test_set(workspace)
    classifier = materialize_model(load_checkpoint(workspace.classifier_path))
    frozen = precompute_embeddings(classifier, test_set)
    suite = evaluate_suite(fused, test_set, frozen=frozen)
    stored = np.load(
        workspace.outdir / "pretrained" / "3" / "0" / "mean_probs.npy")
    assert np.allclose(suite.mean_probs, stored, atol=1e-12)


# ---------------------------------------------------------------------------
# Standalone report emission


def test_emit_report_without_config(workspace, tmp_path):
    table = ResultsTable(rows=[workspace.table.rows[0]])
    written = emit_report(table, tmp_path / "solo")
    names = sorted(p.name for p in written)
    assert names == ["aprc_vs_train_size.png", "count_error_all_chips.png",
                     "count_error_empty_chips.png",
                     "count_error_landslide_chips.png", "provenance.json",
                     "results.csv"]
    provenance = json.loads((tmp_path / "solo" / "provenance.json").read_text())
    assert provenance["config"] is None
