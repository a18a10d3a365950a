"""Command-line surface binding the pipeline together.

Every subcommand reads an optional JSON config file (``--config``) whose keys
are authoritative; a handful of flags override individual entries so the same
versioned config can drive slightly different runs.  Unknown config keys are
rejected.  Relative output paths resolve under ``$SARSLIDE_OUTPUT_ROOT`` when
that variable is set, and each command echoes its effective configuration next
to its outputs so any artifact can be reproduced from disk alone.

Exit codes: 0 success, 1 generic failure, 2 config error, 3 data error,
4 training failure.  Errors print a single machine-parsable line on stderr:
``sarslide: error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .chips import (
    ROLES,
    balance_chipset,
    compute_normalization_stats,
    normalize_chipset,
    read_chipset,
    read_split_manifest,
    split_chipset,
    write_chipset,
    write_split_manifest,
)
from .errors import ConfigError, DataError, SarslideError
from .experiments import (
    _ARCH_FIELDS,
    _HYPER_FIELDS,
    _reject_unknown,
    ExperimentConfig,
    emit_report,
    evaluate_suite,
    load_normalized_roles,
    read_results_csv,
    run_ablation,
)
from .metrics import (
    aggregate,
    average_precision,
    random_baseline_aprc,
    write_count_errors_csv,
    write_report_json,
)
from .nets import ArchConfig
from .synth import SyntheticConfig, generate_synthetic_chipset
from .training import (
    _arch_from_json,
    _arch_to_json,
    Hyperparams,
    load_checkpoint,
    materialize_model,
    precompute_embeddings,
    pretrain_classifier,
    save_checkpoint,
    train_segmenter,
)

# ---------------------------------------------------------------------------
# Config plumbing


def resolve_out(path) -> Path:
    """Output path, with relative paths rooted at $SARSLIDE_OUTPUT_ROOT."""
    p = Path(path)
    root = os.environ.get("SARSLIDE_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return payload


def _apply_overrides(config: dict, args, keys) -> None:
    """Copy parsed flag values over config entries; flags win when given."""
    for key in keys:
        value = getattr(args, key)
        if value is not None:
            config[key] = value


def _require(config: dict, key: str, command: str):
    if config.get(key) is None:
        raise ConfigError(f"'{command}' requires {key!r} (config key or flag)")
    return config[key]


def _int_pair(value, name: str) -> tuple:
    try:
        a, b = value
        return (int(a), int(b))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a pair of ints, got {value!r}") from exc


def _hyper_from_payload(payload) -> Hyperparams:
    if not isinstance(payload, dict):
        raise ConfigError("hyper section must be a JSON object")
    _reject_unknown(payload, _HYPER_FIELDS, "hyper")
    hyper = Hyperparams(**payload)
    hyper.validate()
    return hyper


def _arch_from_payload(payload) -> ArchConfig:
    if not isinstance(payload, dict):
        raise ConfigError("arch section must be a JSON object")
    _reject_unknown(payload, _ARCH_FIELDS, "arch")
    arch = _arch_from_json({**_arch_to_json(ArchConfig()), **payload})
    arch.validate()
    return arch


def _echo_config(config: dict, outdir: Path, command: str) -> None:
    """Write the effective config so the run is reproducible from disk."""
    payload = {"command": command,
               "config": {k: config[k] for k in sorted(config)}}
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# synth


_SYNTH_KEYS = {"n_chips", "seed", "positive_fraction", "looks", "contrast",
               "blob_count_range", "blob_radius_range_px", "output_dir"}


def cmd_synth(args) -> int:
    config = _load_config_file(args.config)
    _reject_unknown(config, _SYNTH_KEYS, "synth config")
    _apply_overrides(config, args, ("n_chips", "seed", "output_dir"))
    out = resolve_out(_require(config, "output_dir", "synth"))
    gen = SyntheticConfig(
        n_chips=int(_require(config, "n_chips", "synth")),
        seed=int(_require(config, "seed", "synth")),
        positive_fraction=float(config.get("positive_fraction", 0.5)),
        looks=int(config.get("looks", 4)),
        contrast=float(config.get("contrast", 3.0)),
        blob_count_range=_int_pair(config.get("blob_count_range", (1, 4)),
                                   "blob_count_range"),
        blob_radius_range_px=_int_pair(
            config.get("blob_radius_range_px", (6, 20)),
            "blob_radius_range_px"),
    )
    gen.validate()
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty; "
                        "pass --force to write into it anyway")
    chipset = generate_synthetic_chipset(gen)
    write_chipset(chipset, out)
    _echo_config(config, out, "synth")
    n_pos = sum(1 for c in chipset if c.has_landslide)
    print(f"wrote {len(chipset)} chips ({n_pos} with landslides) to {out}")
    return 0


# ---------------------------------------------------------------------------
# split


_SPLIT_KEYS = {"chips_dir", "fractions", "seed", "output_csv", "balance",
               "balance_target"}


def cmd_split(args) -> int:
    config = _load_config_file(args.config)
    _reject_unknown(config, _SPLIT_KEYS, "split config")
    _apply_overrides(config, args, ("chips_dir", "seed", "output_csv",
                                    "balance"))
    chipset = read_chipset(_require(config, "chips_dir", "split"))
    seed = int(config.get("seed", 0))
    balance = bool(config.get("balance", False))
    n_pos = sum(1 for c in chipset if c.has_landslide)
    n_neg = len(chipset) - n_pos
    if abs(n_pos - n_neg) > 1 and not balance:
        raise DataError(
            f"chip set is unbalanced ({n_pos} positive vs {n_neg} negative); "
            "pass --balance to discard surplus majority-class chips")
    if balance:
        chipset = balance_chipset(
            chipset, float(config.get("balance_target", 0.5)), seed=seed)
    fractions = tuple(float(f) for f in _require(config, "fractions", "split"))
    manifest = split_chipset(chipset, fractions, seed=seed)
    path = write_split_manifest(
        manifest, resolve_out(_require(config, "output_csv", "split")))
    counts = manifest.counts()
    summary = ", ".join(f"{role}={counts[role]}" for role in ROLES)
    print(f"assigned {len(chipset)} chips ({summary}); manifest at {path}")
    return 0


# ---------------------------------------------------------------------------
# pretrain


_PRETRAIN_KEYS = {"chips_dir", "split_manifest", "arch", "hyper", "output_dir"}


def cmd_pretrain(args) -> int:
    config = _load_config_file(args.config)
    _reject_unknown(config, _PRETRAIN_KEYS, "pretrain config")
    _apply_overrides(config, args, ("chips_dir", "split_manifest",
                                    "output_dir"))
    arch = _arch_from_payload(config.get("arch", {}))
    hyper = _hyper_from_payload(config.get("hyper", {}))
    outdir = resolve_out(_require(config, "output_dir", "pretrain"))
    chips = read_chipset(_require(config, "chips_dir", "pretrain"))
    manifest = read_split_manifest(_require(config, "split_manifest",
                                            "pretrain"))
    pre_ids = manifest.role_ids("pretrain")
    val_ids = manifest.role_ids("validation")
    if not pre_ids:
        raise DataError("split has no pretraining chips")
    if not val_ids:
        raise DataError("split has no validation chips")
    stats = compute_normalization_stats(chips.subset(pre_ids))
    normalized, _ = normalize_chipset(chips, stats)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "normalization.json").write_text(
        json.dumps(stats.to_json(), indent=2, sort_keys=True) + "\n")
    checkpoints = pretrain_classifier(
        normalized.subset(pre_ids), normalized.subset(val_ids), arch, hyper,
        log_path=outdir / "train_log.json")
    for rank, cp in enumerate(checkpoints):
        save_checkpoint(cp, outdir / f"checkpoint_{rank}")
    _echo_config(config, outdir, "pretrain")
    print(f"kept {len(checkpoints)} classifier checkpoints in {outdir}; "
          f"best validation accuracy {checkpoints[0].val_metric:.4f}")
    return 0


# ---------------------------------------------------------------------------
# train-seg


_TRAIN_SEG_KEYS = {"chips_dir", "split_manifest", "normalization_stats",
                   "pretrained", "arch", "hyper", "output_dir"}


def cmd_train_seg(args) -> int:
    config = _load_config_file(args.config)
    _reject_unknown(config, _TRAIN_SEG_KEYS, "train-seg config")
    _apply_overrides(config, args, ("chips_dir", "split_manifest",
                                    "pretrained", "output_dir"))
    arch = _arch_from_payload(config.get("arch", {}))
    hyper = _hyper_from_payload(config.get("hyper", {}))
    outdir = resolve_out(_require(config, "output_dir", "train-seg"))
    roles = load_normalized_roles(
        _require(config, "chips_dir", "train-seg"),
        _require(config, "split_manifest", "train-seg"),
        config.get("normalization_stats"),
        ("seg_train", "validation"))
    pretrained = None
    if config.get("pretrained") is not None:
        pretrained = load_checkpoint(config["pretrained"])
    outdir.mkdir(parents=True, exist_ok=True)
    checkpoints = train_segmenter(
        roles["seg_train"], roles["validation"], pretrained, arch, hyper,
        log_path=outdir / "train_log.json")
    for rank, cp in enumerate(checkpoints):
        save_checkpoint(cp, outdir / f"checkpoint_{rank}")
    _echo_config(config, outdir, "train-seg")
    mode = "with" if pretrained is not None else "without"
    print(f"kept {len(checkpoints)} segmenter checkpoints ({mode} pretrained "
          f"fusion) in {outdir}; best validation score "
          f"{checkpoints[0].val_metric:.4f}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    if args.config is None:
        raise ConfigError("'ablate' requires --config")
    payload = _load_config_file(args.config)
    if args.output_dir is not None:
        payload["output_dir"] = args.output_dir
    if payload.get("output_dir") is not None:
        payload["output_dir"] = str(resolve_out(payload["output_dir"]))
    config = ExperimentConfig.from_json(payload)
    table = run_ablation(config, jobs=args.jobs)
    for failure in table.failures:
        print(f"warning: cell {failure['variant']}/size"
              f"{failure['train_size']}/seed {failure['seed_index']} failed: "
              f"{failure['error']}", file=sys.stderr)
    print(f"{len(table.rows)} result rows in {config.output_dir} "
          f"({len(table.failures)} failed cells)")
    return 0


# ---------------------------------------------------------------------------
# eval


_EVAL_KEYS = {"chips_dir", "split_manifest", "normalization_stats",
              "checkpoints_dir", "checkpoints", "pretrained", "output_dir"}


def cmd_eval(args) -> int:
    config = _load_config_file(args.config)
    _reject_unknown(config, _EVAL_KEYS, "eval config")
    _apply_overrides(config, args, ("chips_dir", "split_manifest",
                                    "checkpoints_dir", "pretrained",
                                    "output_dir"))
    outdir = resolve_out(_require(config, "output_dir", "eval"))
    paths = config.get("checkpoints")
    if paths is None:
        cdir = Path(_require(config, "checkpoints_dir", "eval"))
        paths = sorted(cdir.glob("checkpoint_*.json"))
        if not paths:
            raise DataError(f"no checkpoint_*.json files in {cdir}")
    elif not paths:
        raise DataError("'checkpoints' names no checkpoint files")
    checkpoints = [load_checkpoint(p) for p in paths]
    test = load_normalized_roles(
        _require(config, "chips_dir", "eval"),
        _require(config, "split_manifest", "eval"),
        config.get("normalization_stats"), ("test",))["test"]
    frozen = None
    if any(cp.uses_pretrained for cp in checkpoints):
        if config.get("pretrained") is None:
            raise ConfigError(
                "checkpoints fuse pretrained embeddings; 'pretrained' must "
                "name the classifier checkpoint they were trained against")
        classifier = materialize_model(load_checkpoint(config["pretrained"]))
        frozen = precompute_embeddings(classifier, test)
    suite = evaluate_suite(checkpoints, test, frozen)
    masks = np.stack([c.mask for c in test])
    labels = masks.ravel().astype(int)
    report = aggregate(
        float(average_precision(suite.mean_probs.ravel(), labels)),
        float(random_baseline_aprc(labels)),
        suite.checkpoint_aprcs, suite.chip_records)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics_path = write_report_json(report, outdir / "metrics.json")
    errors_path = write_count_errors_csv(suite.chip_records,
                                         outdir / "count_errors.csv")
    _echo_config(config, outdir, "eval")
    print(f"test score {report.aprc:.4f} vs random baseline "
          f"{report.aprc_random_baseline:.4f} over {len(checkpoints)} "
          f"checkpoints; wrote {metrics_path} and {errors_path}")
    return 0


# ---------------------------------------------------------------------------
# report


_REPORT_KEYS = {"results_csv", "output_dir"}


def cmd_report(args) -> int:
    config = _load_config_file(args.config)
    _reject_unknown(config, _REPORT_KEYS, "report config")
    _apply_overrides(config, args, ("results_csv", "output_dir"))
    table = read_results_csv(_require(config, "results_csv", "report"))
    outdir = resolve_out(_require(config, "output_dir", "report"))
    written = emit_report(table, outdir)
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarslide",
        description="Landslide mapping from SAR chip pairs: synthesize data, "
                    "split it into roles, train the two-phase model, and run "
                    "the pretraining ablation.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="JSON",
                       help="JSON config file; flags override its keys")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "Generate a synthetic chip set.")
    p.add_argument("--n-chips", type=int, dest="n_chips")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty output directory")

    p = add("split", cmd_split,
            "Assign chips to pretrain/seg_train/validation/test roles.")
    p.add_argument("--chips-dir", dest="chips_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-csv", dest="output_csv")
    p.add_argument("--balance", action="store_true", default=None,
                   help="discard surplus majority-class chips first")

    p = add("pretrain", cmd_pretrain,
            "Train the chip classifier and save its top checkpoints.")
    p.add_argument("--chips-dir", dest="chips_dir")
    p.add_argument("--split-manifest", dest="split_manifest")
    p.add_argument("--output-dir", dest="output_dir")

    p = add("train-seg", cmd_train_seg,
            "Train the segmenter, optionally fusing frozen classifier "
            "embeddings.")
    p.add_argument("--chips-dir", dest="chips_dir")
    p.add_argument("--split-manifest", dest="split_manifest")
    p.add_argument("--pretrained", dest="pretrained",
                   help="classifier checkpoint to fuse")
    p.add_argument("--output-dir", dest="output_dir")

    p = add("ablate", cmd_ablate,
            "Run the resumable pretraining-ablation grid and emit reports.")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--jobs", type=int, default=1,
                   help="max concurrent grid cells")

    p = add("eval", cmd_eval,
            "Evaluate a checkpoint ensemble on the test split.")
    p.add_argument("--chips-dir", dest="chips_dir")
    p.add_argument("--split-manifest", dest="split_manifest")
    p.add_argument("--checkpoints-dir", dest="checkpoints_dir")
    p.add_argument("--pretrained", dest="pretrained")
    p.add_argument("--output-dir", dest="output_dir")

    p = add("report", cmd_report,
            "Re-render plots and CSV from an existing results table.")
    p.add_argument("--results-csv", dest="results_csv")
    p.add_argument("--output-dir", dest="output_dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SarslideError as exc:
        message = " ".join(str(exc).split())
        print(f"sarslide: error[{exc.code}]: {message}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
