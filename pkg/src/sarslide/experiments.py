"""Ablation harness: training-set sizes × seeds × pretraining variants.

``run_ablation`` trains a grid of segmentation models on subsampled training
sets, evaluates every cell's checkpoint ensemble on the held-out test split,
and reduces the grid into a ``ResultsTable`` with a CSV, four plots, and a
provenance block.  Cells are resumable through on-disk completion markers and
are independent jobs, so a rerun only aggregates.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .chips import (
    ChipSet,
    NormalizationStats,
    normalize_chipset,
    read_chipset,
    read_split_manifest,
)
from .errors import ConfigError, DataError
from .losses import sigmoid
from .metrics import (
    MetricsReport,
    aggregate,
    average_precision,
    count_error_record,
    random_baseline_aprc,
)
from .nets import ArchConfig
from .training import (
    Checkpoint,
    Hyperparams,
    _arch_from_json,
    _arch_to_json,
    load_checkpoint,
    materialize_model,
    precompute_embeddings,
    save_checkpoint,
    train_segmenter,
)

DEFAULT_TRAIN_SIZES = (2, 5, 10, 20, 110)
BASELINE_VARIANT = "none"


def default_seeds_for_size(size: int) -> int:
    """Five repeats at the smallest training size, three otherwise."""
    return 5 if size == 2 else 3


# ---------------------------------------------------------------------------
# Configuration


_HYPER_FIELDS = {f.name for f in dataclasses.fields(Hyperparams)}
_ARCH_FIELDS = {f.name for f in dataclasses.fields(ArchConfig)}
_DATA_FIELDS = {"chips_dir", "split_manifest", "normalization_stats"}
_TOP_FIELDS = {"train_sizes", "seeds_per_size", "variants", "hyper", "arch",
               "data", "output_dir", "base_seed"}


def _reject_unknown(payload: dict, allowed: set, context: str) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown {context} key(s): {unknown}")


@dataclass
class ExperimentConfig:
    """Full declarative description of one ablation run."""

    train_sizes: list
    seeds_per_size: dict          # size -> number of repeat seeds
    variants: dict                # name -> classifier checkpoint path, or None
    hyper: Hyperparams
    arch: ArchConfig
    chips_dir: str
    split_manifest: str
    output_dir: str
    normalization_stats: Optional[str] = None
    base_seed: int = 100

    def validate(self) -> None:
        if not self.train_sizes:
            raise ConfigError("train_sizes must be nonempty")
        for n in self.train_sizes:
            if not isinstance(n, int) or isinstance(n, bool) or n < 1:
                raise ConfigError(f"train size must be a positive int, got {n!r}")
        if len(set(self.train_sizes)) != len(self.train_sizes):
            raise ConfigError(f"duplicate train sizes: {self.train_sizes}")
        for n in self.train_sizes:
            repeats = self.seeds_per_size.get(n)
            if not isinstance(repeats, int) or repeats < 1:
                raise ConfigError(
                    f"seeds_per_size[{n}] must be a positive int, got {repeats!r}")
        if not self.variants:
            raise ConfigError("at least one variant is required")
        for name, path in self.variants.items():
            if not name or not isinstance(name, str):
                raise ConfigError(f"variant names must be nonempty strings, got {name!r}")
            if path is None and name != BASELINE_VARIANT:
                raise ConfigError(
                    f"variant {name!r} needs a pretrained checkpoint path; only "
                    f"{BASELINE_VARIANT!r} trains without one"
                )
            if path is not None and not isinstance(path, str):
                raise ConfigError(f"variant {name!r} path must be a string")
        self.hyper.validate()
        self.arch.validate()
        if self.hyper.max_epochs < self.hyper.top_k_checkpoints:
            raise ConfigError(
                "max_epochs must be at least top_k_checkpoints so every cell "
                "yields a full checkpoint inventory"
            )
        if not isinstance(self.base_seed, int) or self.base_seed < 0:
            raise ConfigError(f"base_seed must be a nonnegative int, got {self.base_seed!r}")

    def to_json(self) -> dict:
        return {
            "train_sizes": list(self.train_sizes),
            "seeds_per_size": {str(k): v for k, v in self.seeds_per_size.items()},
            "variants": dict(self.variants),
            "hyper": dataclasses.asdict(self.hyper),
            "arch": _arch_to_json(self.arch),
            "data": {
                "chips_dir": self.chips_dir,
                "split_manifest": self.split_manifest,
                "normalization_stats": self.normalization_stats,
            },
            "output_dir": self.output_dir,
            "base_seed": self.base_seed,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("experiment config must be a JSON object")
        _reject_unknown(payload, _TOP_FIELDS, "experiment config")
        for required in ("variants", "data", "output_dir"):
            if required not in payload:
                raise ConfigError(f"experiment config is missing {required!r}")
        data = payload["data"]
        if not isinstance(data, dict):
            raise ConfigError("data section must be a JSON object")
        _reject_unknown(data, _DATA_FIELDS, "data")
        for required in ("chips_dir", "split_manifest"):
            if required not in data:
                raise ConfigError(f"data section is missing {required!r}")

        hyper_payload = payload.get("hyper", {})
        _reject_unknown(hyper_payload, _HYPER_FIELDS, "hyper")
        arch_payload = payload.get("arch", {})
        _reject_unknown(arch_payload, _ARCH_FIELDS, "arch")

        train_sizes = list(payload.get("train_sizes", DEFAULT_TRAIN_SIZES))
        raw_seeds = payload.get("seeds_per_size", {})
        if not isinstance(raw_seeds, dict):
            raise ConfigError("seeds_per_size must be a JSON object")
        seeds = {}
        for key, value in raw_seeds.items():
            try:
                size = int(key)
            except (TypeError, ValueError):
                raise ConfigError(f"seeds_per_size key {key!r} is not an int")
            seeds[size] = value
        unknown_sizes = sorted(set(seeds) - set(train_sizes))
        if unknown_sizes:
            raise ConfigError(
                f"seeds_per_size lists sizes not in train_sizes: {unknown_sizes}")
        for size in train_sizes:
            seeds.setdefault(size, default_seeds_for_size(size))

        config = cls(
            train_sizes=train_sizes,
            seeds_per_size=seeds,
            variants=dict(payload["variants"]),
            hyper=Hyperparams(**hyper_payload),
            arch=_arch_from_json({**_arch_to_json(ArchConfig()), **arch_payload}),
            chips_dir=str(data["chips_dir"]),
            split_manifest=str(data["split_manifest"]),
            output_dir=str(payload["output_dir"]),
            normalization_stats=(None if data.get("normalization_stats") is None
                                 else str(data["normalization_stats"])),
            base_seed=payload.get("base_seed", 100),
        )
        config.validate()
        return config


def cell_seed(base_seed: int, train_size: int, seed_index: int) -> int:
    """Stable per-cell seed: adding sizes or variants never reshuffles others."""
    return base_seed + 1000 * train_size + seed_index


# ---------------------------------------------------------------------------
# Subsampling


def subsample_training_set(chipset: ChipSet, n: int, seed: int) -> ChipSet:
    """Uniform subset without replacement, kept in source order."""
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool):
        raise DataError(f"subsample size must be an int, got {n!r}")
    if n < 1 or n > len(chipset):
        raise DataError(
            f"subsample size {n} outside 1..{len(chipset)}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx = np.sort(rng.choice(len(chipset), size=int(n), replace=False))
    return ChipSet([chipset[int(i)] for i in idx],
                   provenance=chipset.provenance,
                   pixel_spacing_m=chipset.pixel_spacing_m)


# ---------------------------------------------------------------------------
# Evaluation suite


@dataclass
class SuiteResult:
    """Test-split outputs for one checkpoint ensemble."""

    chip_ids: list
    mean_probs: np.ndarray        # (N, chip, chip) ensemble probabilities
    checkpoint_aprcs: list        # one pooled-pixel score per checkpoint
    chip_records: list            # ChipCountError per test chip


def evaluate_suite(checkpoints, test_set: ChipSet, frozen=None) -> SuiteResult:
    """Evaluate an ensemble on the test split with a leakage audit.

    ``frozen`` is the precomputed (pre, post) embedding pair for the whole
    test split when the checkpoints fuse a pretrained model.
    """
    if len(test_set) == 0:
        raise DataError("empty test split")
    if not checkpoints:
        raise DataError("no checkpoints to evaluate")
    test_ids = set(test_set.chip_ids())
    for cp in checkpoints:
        leaked = test_ids & set(cp.train_chip_ids)
        if leaked:
            raise DataError(
                f"test chips leaked into a training set: {sorted(leaked)[:5]}")
    flags = {bool(cp.uses_pretrained) for cp in checkpoints}
    if len(flags) > 1:
        raise DataError("mixed uses_pretrained flags in ensemble")
    if flags == {True} and frozen is None:
        raise DataError("checkpoints fuse a pretrained model but no frozen "
                        "embeddings were given")

    pre = np.stack([c.pre for c in test_set])
    post = np.stack([c.post for c in test_set])
    masks = np.stack([c.mask for c in test_set])
    labels = masks.ravel().astype(int)
    slices = [slice(i, min(i + 32, len(test_set)))
              for i in range(0, len(test_set), 32)]

    mean = np.zeros(masks.shape, dtype=np.float64)
    aprcs = []
    for cp in checkpoints:
        model = materialize_model(cp)
        probs = np.concatenate([
            sigmoid(model.forward(
                pre[sl], post[sl],
                None if frozen is None else (frozen[0][sl], frozen[1][sl])))
            for sl in slices
        ])
        aprcs.append(float(average_precision(probs.ravel(), labels)))
        mean += probs
    mean /= len(checkpoints)
    records = [count_error_record(cid, mean[i], masks[i])
               for i, cid in enumerate(test_set.chip_ids())]
    return SuiteResult(chip_ids=test_set.chip_ids(), mean_probs=mean,
                       checkpoint_aprcs=aprcs, chip_records=records)


# ---------------------------------------------------------------------------
# Results table


@dataclass
class RowResult:
    """One (variant, train size) cell of the results table."""

    variant: str
    train_size: int
    report: MetricsReport
    checkpoint_count: int


@dataclass
class ResultsTable:
    rows: list
    failures: list = field(default_factory=list, compare=False)

    def row(self, variant: str, train_size: int) -> RowResult:
        for row in self.rows:
            if row.variant == variant and row.train_size == train_size:
                return row
        raise DataError(f"no results row for ({variant!r}, {train_size})")


_CSV_COLUMNS = [
    "variant", "train_size", "aprc", "aprc_error_bar",
    "aprc_random_baseline", "n_runs", "median_delta_l1",
    "median_delta_count_empty", "median_delta_count_landslide",
    "missing_categories", "checkpoint_count",
]


def _num_to_str(value) -> str:
    if value is None:
        return ""
    return repr(int(value)) if isinstance(value, (int, np.integer)) \
        else repr(float(value))


def _str_to_num(text: str):
    if text == "":
        return None
    return float(text) if any(c in text for c in ".eE") else int(text)


def write_results_csv(table: ResultsTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(_CSV_COLUMNS)]
    for row in table.rows:
        r = row.report
        lines.append(",".join([
            row.variant,
            str(row.train_size),
            _num_to_str(r.aprc),
            _num_to_str(r.aprc_error_bar),
            _num_to_str(r.aprc_random_baseline),
            str(r.n_runs),
            _num_to_str(r.median_delta_l1),
            _num_to_str(r.median_delta_count_empty),
            _num_to_str(r.median_delta_count_landslide),
            "|".join(r.missing_categories),
            str(row.checkpoint_count),
        ]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_results_csv(path) -> ResultsTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"results file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != ",".join(_CSV_COLUMNS):
        raise DataError(f"unrecognized results header in {path}")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(_CSV_COLUMNS):
            raise DataError(f"malformed results row: {line!r}")
        report = MetricsReport(
            aprc=_str_to_num(parts[2]),
            aprc_random_baseline=_str_to_num(parts[4]),
            aprc_error_bar=_str_to_num(parts[3]),
            n_runs=int(parts[5]),
            median_delta_l1=_str_to_num(parts[6]),
            median_delta_count_empty=_str_to_num(parts[7]),
            median_delta_count_landslide=_str_to_num(parts[8]),
            missing_categories=parts[9].split("|") if parts[9] else [],
        )
        rows.append(RowResult(variant=parts[0], train_size=int(parts[1]),
                              report=report, checkpoint_count=int(parts[10])))
    return ResultsTable(rows=rows)


# ---------------------------------------------------------------------------
# The ablation run


def load_normalized_roles(chips_dir, split_manifest, normalization_stats,
                          roles) -> dict:
    """Normalized chip sets per role, with the stats-fitting fallback.

    Stats come from the given file when provided; otherwise they are fit on
    the pretraining split, or on the segmentation training split when no
    pretraining split exists.
    """
    chips = read_chipset(chips_dir)
    manifest = read_split_manifest(split_manifest)
    if normalization_stats is not None:
        stats_path = Path(normalization_stats)
        if not stats_path.exists():
            raise DataError(f"normalization stats not found: {stats_path}")
        stats = NormalizationStats.from_json(json.loads(stats_path.read_text()))
    else:
        fit_ids = manifest.role_ids("pretrain") or manifest.role_ids("seg_train")
        if not fit_ids:
            raise DataError(
                "no pretrain or seg_train chips to fit normalization stats on")
        from .chips import compute_normalization_stats
        stats = compute_normalization_stats(chips.subset(fit_ids))
    normalized, _ = normalize_chipset(chips, stats)
    splits = {}
    for role in roles:
        ids = manifest.role_ids(role)
        if not ids:
            raise DataError(f"split role {role!r} is empty")
        splits[role] = normalized.subset(ids)
    return splits


def _load_splits(config: ExperimentConfig):
    return load_normalized_roles(
        config.chips_dir, config.split_manifest, config.normalization_stats,
        ("seg_train", "validation", "test"))


def _load_pretrained(config: ExperimentConfig) -> dict:
    loaded = {}
    for name, path in config.variants.items():
        if path is None:
            loaded[name] = None
            continue
        cp = load_checkpoint(path)
        if cp.kind != "classifier":
            raise DataError(
                f"variant {name!r} must point at a classifier checkpoint, "
                f"got kind {cp.kind!r}"
            )
        loaded[name] = cp
    return loaded


def _cell_dir(outdir: Path, variant: str, size: int, seed_index: int) -> Path:
    return outdir / variant / str(size) / str(seed_index)


def _run_cell(config: ExperimentConfig, cdir: Path, seed: int,
              seg_train: ChipSet, val: ChipSet, test: ChipSet,
              pretrained: Optional[Checkpoint], test_frozen, size: int) -> None:
    cdir.mkdir(parents=True, exist_ok=True)
    subset = subsample_training_set(seg_train, size, seed)
    hyper = dataclasses.replace(config.hyper, seed=seed)
    checkpoints = train_segmenter(subset, val, pretrained, config.arch, hyper,
                                  log_path=cdir / "train_log.json")
    for rank, cp in enumerate(checkpoints):
        save_checkpoint(cp, cdir / f"checkpoint_{rank}")
    suite = evaluate_suite(checkpoints, test, frozen=test_frozen)
    np.save(cdir / "mean_probs.npy", suite.mean_probs)
    metrics_payload = {
        "seed": seed,
        "train_size": size,
        "n_checkpoints": len(checkpoints),
        "checkpoint_aprcs": suite.checkpoint_aprcs,
        "ensemble_aprc": float(average_precision(
            suite.mean_probs.ravel(),
            np.stack([c.mask for c in test]).ravel().astype(int))),
        "train_chip_ids": subset.chip_ids(),
    }
    (cdir / "metrics.json").write_text(
        json.dumps(metrics_payload, indent=2) + "\n")
    (cdir / "done.marker").write_text("complete\n")


def _aggregate_row(variant: str, size: int, cell_dirs: list, test: ChipSet) -> RowResult:
    per_run = []
    maps = []
    weights = []
    for cdir in cell_dirs:
        payload = json.loads((cdir / "metrics.json").read_text())
        per_run.extend(payload["checkpoint_aprcs"])
        maps.append(np.load(cdir / "mean_probs.npy"))
        weights.append(payload["n_checkpoints"])
    total = sum(weights)
    mean = sum(w * m for w, m in zip(weights, maps)) / total
    masks = np.stack([c.mask for c in test])
    labels = masks.ravel().astype(int)
    records = [count_error_record(cid, mean[i], masks[i])
               for i, cid in enumerate(test.chip_ids())]
    report = aggregate(
        float(average_precision(mean.ravel(), labels)),
        float(random_baseline_aprc(labels)),
        per_run, records)
    return RowResult(variant=variant, train_size=size, report=report,
                     checkpoint_count=total)


def run_ablation(config: ExperimentConfig, jobs: int = 1) -> ResultsTable:
    """Train/evaluate the full grid, resuming completed cells, and emit reports."""
    config.validate()
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(config)
    seg_train, val, test = splits["seg_train"], splits["validation"], splits["test"]
    oversized = [n for n in config.train_sizes if n > len(seg_train)]
    if oversized:
        raise DataError(
            f"train sizes {oversized} exceed the segmentation training split "
            f"({len(seg_train)} chips)"
        )
    pretrained = _load_pretrained(config)
    test_frozen = {}
    for name, cp in pretrained.items():
        if cp is not None:
            test_frozen[name] = precompute_embeddings(
                materialize_model(cp), test, config.hyper.batch_size)

    pending = []
    for variant in config.variants:
        for size in config.train_sizes:
            for idx in range(config.seeds_per_size[size]):
                cdir = _cell_dir(outdir, variant, size, idx)
                if not (cdir / "done.marker").exists():
                    pending.append((variant, size, idx, cdir))

    failures = []

    def job(cell):
        variant, size, idx, cdir = cell
        try:
            _run_cell(config, cdir, cell_seed(config.base_seed, size, idx),
                      seg_train, val, test, pretrained[variant],
                      test_frozen.get(variant), size)
        except Exception as exc:  # record, keep other cells running
            failures.append({"variant": variant, "train_size": size,
                             "seed_index": idx, "error": str(exc)})

    if jobs > 1 and len(pending) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(job, pending))
    else:
        for cell in pending:
            job(cell)

    rows = []
    incomplete = []
    for variant in sorted(config.variants):
        for size in config.train_sizes:
            cell_dirs = [_cell_dir(outdir, variant, size, i)
                         for i in range(config.seeds_per_size[size])]
            if all((d / "done.marker").exists() for d in cell_dirs):
                rows.append(_aggregate_row(variant, size, cell_dirs, test))
            else:
                incomplete.append({"variant": variant, "train_size": size})

    failures = sorted(failures, key=lambda f: (f["variant"], f["train_size"],
                                               f["seed_index"]))
    table = ResultsTable(rows=rows, failures=failures)
    emit_report(table, outdir, config=config, incomplete=incomplete)
    return table


# ---------------------------------------------------------------------------
# Report emission


def _plot_series(ax, table: ResultsTable, value_of, label_suffix=""):
    for variant in sorted({row.variant for row in table.rows}):
        rows = sorted((r for r in table.rows if r.variant == variant),
                      key=lambda r: r.train_size)
        xs = [r.train_size for r in rows]
        ys = [value_of(r) for r in rows]
        keep = [(x, y) for x, y in zip(xs, ys) if y is not None]
        if not keep:
            continue
        ax.plot([x for x, _ in keep], [y for _, y in keep], marker="o",
                label=variant + label_suffix)
    ax.set_xscale("log")
    ax.set_xticks(sorted({r.train_size for r in table.rows}))
    ax.get_xaxis().set_major_formatter("{x:.0f}")
    ax.set_xlabel("training chips")
    ax.legend()


def emit_report(table: ResultsTable, outdir, config: Optional[ExperimentConfig] = None,
                incomplete=()) -> list:
    """Write results.csv, four plots, and provenance.json; returns the paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    report_dir = outdir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    written = [write_results_csv(table, outdir / "results.csv")]

    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in sorted({row.variant for row in table.rows}):
        rows = sorted((r for r in table.rows if r.variant == variant),
                      key=lambda r: r.train_size)
        ax.errorbar([r.train_size for r in rows],
                    [r.report.aprc for r in rows],
                    yerr=[r.report.aprc_error_bar for r in rows],
                    marker="o", capsize=3, label=variant)
    if table.rows:
        ax.axhline(table.rows[0].report.aprc_random_baseline, linestyle="--",
                   color="gray", label="random scores")
    ax.set_xscale("log")
    ax.set_xticks(sorted({r.train_size for r in table.rows}))
    ax.get_xaxis().set_major_formatter("{x:.0f}")
    ax.set_xlabel("training chips")
    ax.set_ylabel("area under recall-precision curve")
    ax.legend()
    fig.tight_layout()
    path = report_dir / "aprc_vs_train_size.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    count_specs = [
        ("count_error_all_chips.png", "median |count error|, all chips",
         lambda r: r.report.median_delta_l1),
        ("count_error_empty_chips.png", "median count error, empty chips",
         lambda r: r.report.median_delta_count_empty),
        ("count_error_landslide_chips.png", "median count error, landslide chips",
         lambda r: r.report.median_delta_count_landslide),
    ]
    for filename, ylabel, value_of in count_specs:
        fig, ax = plt.subplots(figsize=(6, 4))
        _plot_series(ax, table, value_of)
        ax.axhline(0.0, linewidth=0.8, color="black")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        path = report_dir / filename
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    from . import __version__
    config_json = None if config is None else config.to_json()
    canonical = json.dumps(config_json, sort_keys=True)
    seeds = None
    if config is not None:
        seeds = {
            str(size): [cell_seed(config.base_seed, size, i)
                        for i in range(config.seeds_per_size[size])]
            for size in config.train_sizes
        }
    provenance = {
        "package_version": __version__,
        "config": config_json,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seeds": seeds,
        "failures": list(table.failures),
        "incomplete_rows": list(incomplete),
    }
    prov_path = outdir / "provenance.json"
    prov_path.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    written.append(prov_path)
    return written
