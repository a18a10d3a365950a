"""Optimization loops, early stopping, and checkpoint management.

Two training entry points share one engine: ``pretrain_classifier`` fits the
chip-level twin-branch classifier on a cross-entropy objective, and
``train_segmenter`` fits the per-pixel model on a dice objective, optionally
fusing frozen embeddings from a classifier checkpoint.  Both stop early on a
stalled validation loss and return the top-k parameter snapshots ranked by
their validation metric (accuracy for the classifier, area under the
recall-precision curve for the segmenter).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .chips import ChipSet
from .errors import ConfigError, DataError, FormatError, TrainingError
from .layers import grad_arrays, param_arrays, set_param_arrays, zero_grads
from .losses import bce_with_logits, dice_loss, sigmoid
from .metrics import average_precision
from .nets import ArchConfig, build_classifier, build_segmenter
from .optim import adam_step, init_adam_state

CHECKPOINT_KINDS = ("classifier", "segmenter")
CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration and checkpoint types


@dataclass(frozen=True)
class Hyperparams:
    """Optimization settings shared by both training phases."""

    learning_rate: float = 0.001
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience_epochs: int = 50
    max_epochs: int = 1000
    top_k_checkpoints: int = 5
    dice_smoothing: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        positive = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "patience_epochs": self.patience_epochs,
            "max_epochs": self.max_epochs,
            "top_k_checkpoints": self.top_k_checkpoints,
            "dice_smoothing": self.dice_smoothing,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value!r}")
        if self.adam_beta1 >= 1 or self.adam_beta2 >= 1:
            raise ConfigError("adam betas must be < 1")
        if self.patience_epochs > self.max_epochs:
            raise ConfigError(
                f"patience_epochs ({self.patience_epochs}) must not exceed "
                f"max_epochs ({self.max_epochs})"
            )


@dataclass(eq=False)
class Checkpoint:
    """One ranked parameter snapshot plus the metadata to rebuild its model."""

    kind: str                      # "classifier" or "segmenter"
    arch: ArchConfig
    params: list                   # arrays in canonical traversal order
    epoch: int
    val_metric: float
    seed: int
    uses_pretrained: bool
    train_chip_ids: list = field(default_factory=list)

    def validate(self) -> None:
        if self.kind not in CHECKPOINT_KINDS:
            raise DataError(f"unknown checkpoint kind {self.kind!r}")
        if not 0.0 <= self.val_metric <= 1.0:
            raise DataError(
                f"val_metric must lie in [0, 1], got {self.val_metric!r}")
        if self.kind == "classifier" and self.uses_pretrained:
            raise DataError("classifier checkpoints cannot use a pretrained model")


def materialize_model(checkpoint: Checkpoint):
    """Build (and cache on the checkpoint) the model for its parameters."""
    model = getattr(checkpoint, "_model", None)
    if model is not None:
        return model
    checkpoint.validate()
    if checkpoint.kind == "classifier":
        model = build_classifier(checkpoint.arch)
    else:
        model = build_segmenter(checkpoint.arch, checkpoint.uses_pretrained)
    set_param_arrays(model, checkpoint.params)
    checkpoint._model = model
    return model


def checkpoint_probabilities(checkpoint: Checkpoint, pre, post,
                             frozen=None) -> np.ndarray:
    """Per-pixel probabilities from a segmentation checkpoint."""
    if checkpoint.kind != "segmenter":
        raise DataError(
            f"per-pixel probabilities need a segmenter checkpoint, "
            f"got {checkpoint.kind!r}"
        )
    model = materialize_model(checkpoint)
    return sigmoid(model.forward(pre, post, frozen))


# ---------------------------------------------------------------------------
# Early stopping


def early_stop_check(history: Sequence[float], patience: int) -> bool:
    """True once the running-best validation loss is `patience` epochs stale.

    A tie with the best value does not count as an improvement, so staleness
    is measured from the first occurrence of the minimum.
    """
    if len(history) == 0:
        raise DataError("early_stop_check needs a nonempty loss history")
    best = int(np.argmin(history))  # first occurrence of the minimum
    return (len(history) - 1 - best) >= patience


# ---------------------------------------------------------------------------
# Dataset staging


def _check_disjoint(train: ChipSet, val: ChipSet) -> None:
    overlap = sorted(set(train.chip_ids()) & set(val.chip_ids()))
    if overlap:
        raise DataError(
            f"training and validation sets overlap: {overlap[:5]}")


def _stack_images(chipset: ChipSet):
    pre = np.stack([c.pre for c in chipset]).astype(np.float32, copy=False)
    post = np.stack([c.post for c in chipset]).astype(np.float32, copy=False)
    return pre, post


def _stack_flags(chipset: ChipSet) -> np.ndarray:
    return np.array([float(c.has_landslide) for c in chipset])


def _stack_masks(chipset: ChipSet) -> np.ndarray:
    return np.stack([c.mask for c in chipset]).astype(np.float32)


def _eval_slices(n: int, batch_size: int):
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def precompute_embeddings(classifier, chipset: ChipSet,
                          batch_size: int = 32):
    """Frozen embedding pair (pre, post) for every chip, in set order."""
    pre, post = _stack_images(chipset)
    embs_pre, embs_post = [], []
    for sl in _eval_slices(len(chipset), batch_size):
        embs_pre.append(classifier.embed(pre[sl]))
        embs_post.append(classifier.embed(post[sl]))
    return np.concatenate(embs_pre), np.concatenate(embs_post)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_classifier(model, chipset: ChipSet,
                        batch_size: int = 32) -> tuple[float, float]:
    """(mean cross-entropy loss, accuracy at probability threshold 0.5)."""
    if len(chipset) == 0:
        raise DataError("cannot evaluate on an empty chip set")
    pre, post = _stack_images(chipset)
    labels = _stack_flags(chipset)
    logits = np.concatenate([
        model.forward(pre[sl], post[sl])
        for sl in _eval_slices(len(chipset), batch_size)
    ])
    loss, _ = bce_with_logits(logits, labels)
    accuracy = float(np.mean((sigmoid(logits) > 0.5) == (labels > 0.5)))
    return float(loss), accuracy


def evaluate_segmenter(model, chipset: ChipSet, frozen=None,
                       batch_size: int = 32,
                       smoothing: float = 1.0) -> tuple[float, float]:
    """(mean dice loss, area under the recall-precision curve, pooled pixels)."""
    if len(chipset) == 0:
        raise DataError("cannot evaluate on an empty chip set")
    pre, post = _stack_images(chipset)
    masks = _stack_masks(chipset)
    probs = []
    for sl in _eval_slices(len(chipset), batch_size):
        fr = None if frozen is None else (frozen[0][sl], frozen[1][sl])
        probs.append(sigmoid(model.forward(pre[sl], post[sl], fr)))
    probs = np.concatenate(probs)
    loss, _ = dice_loss(probs, masks, smoothing)
    score = average_precision(probs.ravel(), masks.ravel().astype(int))
    return float(loss), float(score)


# ---------------------------------------------------------------------------
# The shared optimization engine


class _TopK:
    """Keeps the best parameter snapshots; ties favor the earlier epoch."""

    def __init__(self, k: int):
        self.k = k
        self.entries: list[tuple[float, int, list]] = []

    def offer(self, metric: float, epoch: int, model) -> None:
        snapshot = [p.copy() for p in param_arrays(model)]
        self.entries.append((metric, epoch, snapshot))
        self.entries.sort(key=lambda e: (-e[0], e[1]))
        del self.entries[self.k:]


def _run_epochs(model, hyper: Hyperparams, n_train: int, train_step,
                validate, log_path, run_info: dict) -> list[tuple[float, int, list]]:
    """Epoch loop shared by both phases.

    train_step(batch_indices) -> batch loss; validate() -> (val_loss,
    val_metric).  Returns the retained (metric, epoch, params) entries in
    rank order and writes the per-run log if a path was given.
    """
    rng = np.random.default_rng(np.random.SeedSequence(hyper.seed))
    top = _TopK(hyper.top_k_checkpoints)
    history: list[float] = []
    rows = []
    stopped_early = False

    for epoch in range(hyper.max_epochs):
        order = rng.permutation(n_train)
        seen = 0
        train_loss = 0.0
        for start in range(0, n_train, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss = train_step(idx)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}")
            train_loss += loss * len(idx)
            seen += len(idx)
        train_loss /= seen

        val_loss, val_metric = validate()
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append(val_loss)
        top.offer(val_metric, epoch, model)
        rows.append({"epoch": epoch, "train_loss": train_loss,
                     "val_loss": val_loss, "val_metric": val_metric})
        if early_stop_check(history, hyper.patience_epochs):
            stopped_early = True
            break

    if log_path is not None:
        payload = dict(run_info)
        payload.update({
            "seed": hyper.seed,
            "epochs_run": len(rows),
            "stopped_early": stopped_early,
            "epochs": rows,
        })
        Path(log_path).write_text(json.dumps(payload, indent=2) + "\n")
    return top.entries


def _optimizer_step(model, state, hyper: Hyperparams):
    params = param_arrays(model)
    new_params, state = adam_step(params, grad_arrays(model), state, hyper)
    set_param_arrays(model, new_params)
    return state


# ---------------------------------------------------------------------------
# Phase one: chip-level classification


def pretrain_classifier(pretrain_set: ChipSet, val_set: ChipSet,
                        arch: ArchConfig, hyper: Hyperparams,
                        log_path=None) -> list[Checkpoint]:
    """Fit the twin-branch chip classifier; return top-k checkpoints.

    Ranked by validation accuracy, descending; early stopping watches the
    validation cross-entropy loss.
    """
    hyper.validate()
    arch.validate()
    if len(pretrain_set) == 0 or len(val_set) == 0:
        raise DataError("both training and validation sets must be nonempty")
    _check_disjoint(pretrain_set, val_set)

    model = build_classifier(arch, seed=hyper.seed)
    state = init_adam_state(param_arrays(model))
    pre, post = _stack_images(pretrain_set)
    labels = _stack_flags(pretrain_set)

    def train_step(idx):
        nonlocal state
        zero_grads(model)
        emb_pre, ctx_pre = model.embed_with_ctx(pre[idx])
        emb_post, ctx_post = model.embed_with_ctx(post[idx])
        logits, head_ctx = model.head_with_ctx(emb_pre, emb_post)
        loss, g_logits = bce_with_logits(logits, labels[idx])
        g_emb_pre, g_emb_post = model.head_backward(head_ctx, g_logits)
        model.embed_backward(ctx_post, g_emb_post)
        model.embed_backward(ctx_pre, g_emb_pre)
        state = _optimizer_step(model, state, hyper)
        return loss

    def validate():
        return evaluate_classifier(model, val_set, hyper.batch_size)

    entries = _run_epochs(
        model, hyper, len(pretrain_set), train_step, validate, log_path,
        {"kind": "classifier", "n_train": len(pretrain_set),
         "n_val": len(val_set)})
    return [
        Checkpoint(kind="classifier", arch=arch, params=snapshot,
                   epoch=epoch, val_metric=metric, seed=hyper.seed,
                   uses_pretrained=False,
                   train_chip_ids=pretrain_set.chip_ids())
        for metric, epoch, snapshot in entries
    ]


# ---------------------------------------------------------------------------
# Phase two: per-pixel segmentation


def _param_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def train_segmenter(seg_train_set: ChipSet, val_set: ChipSet,
                    pretrained: Optional[Checkpoint], arch: ArchConfig,
                    hyper: Hyperparams, log_path=None) -> list[Checkpoint]:
    """Fit the per-pixel model; return top-k checkpoints.

    Ranked by validation area under the recall-precision curve over pooled
    validation pixels, descending; early stopping watches the validation
    dice loss.  When ``pretrained`` is given, its embeddings are computed
    once per chip and fused; its parameters are never updated.
    """
    hyper.validate()
    arch.validate()
    if len(seg_train_set) == 0 or len(val_set) == 0:
        raise DataError("both training and validation sets must be nonempty")
    _check_disjoint(seg_train_set, val_set)
    if not any(c.has_landslide for c in val_set):
        raise DataError(
            "validation set has no landslide pixels; the validation ranking "
            "metric is undefined"
        )

    uses_pretrained = pretrained is not None
    train_frozen = val_frozen = None
    frozen_digest = None
    if uses_pretrained:
        if pretrained.kind != "classifier":
            raise DataError(
                f"pretrained model must be a classifier checkpoint, "
                f"got {pretrained.kind!r}"
            )
        p_arch = pretrained.arch
        if (p_arch.chip_size != arch.chip_size
                or p_arch.input_channels != arch.input_channels
                or p_arch.scaled(p_arch.embedding_channels)
                != arch.scaled(arch.embedding_channels)):
            raise DataError(
                "pretrained checkpoint geometry is incompatible with the "
                "segmentation architecture"
            )
        classifier = materialize_model(pretrained)
        frozen_digest = _param_digest(param_arrays(classifier))
        train_frozen = precompute_embeddings(
            classifier, seg_train_set, hyper.batch_size)
        val_frozen = precompute_embeddings(
            classifier, val_set, hyper.batch_size)

    model = build_segmenter(arch, uses_pretrained, seed=hyper.seed)
    state = init_adam_state(param_arrays(model))
    pre, post = _stack_images(seg_train_set)
    masks = _stack_masks(seg_train_set)

    def train_step(idx):
        nonlocal state
        zero_grads(model)
        fr = None if train_frozen is None else \
            (train_frozen[0][idx], train_frozen[1][idx])
        logits, ctx = model.forward_with_ctx(pre[idx], post[idx], fr)
        probs = sigmoid(logits)
        loss, g_probs = dice_loss(probs, masks[idx], hyper.dice_smoothing)
        model.backward(ctx, g_probs * probs * (1.0 - probs))
        state = _optimizer_step(model, state, hyper)
        return loss

    def validate():
        return evaluate_segmenter(model, val_set, val_frozen,
                                  hyper.batch_size, hyper.dice_smoothing)

    entries = _run_epochs(
        model, hyper, len(seg_train_set), train_step, validate, log_path,
        {"kind": "segmenter", "uses_pretrained": uses_pretrained,
         "n_train": len(seg_train_set), "n_val": len(val_set)})

    if uses_pretrained and _param_digest(
            param_arrays(classifier)) != frozen_digest:
        raise TrainingError("pretrained parameters changed during training")

    return [
        Checkpoint(kind="segmenter", arch=arch, params=snapshot,
                   epoch=epoch, val_metric=metric, seed=hyper.seed,
                   uses_pretrained=uses_pretrained,
                   train_chip_ids=seg_train_set.chip_ids())
        for metric, epoch, snapshot in entries
    ]


# ---------------------------------------------------------------------------
# Checkpoint files: <stem>.json metadata + <stem>.bin little-endian payload


def _arch_to_json(arch: ArchConfig) -> dict:
    payload = dataclasses.asdict(arch)
    for key in ("blocks_per_stage", "seg_channels"):
        if payload[key] is not None:
            payload[key] = list(payload[key])
    return payload


def _arch_from_json(payload: dict) -> ArchConfig:
    kwargs = dict(payload)
    for key in ("blocks_per_stage", "seg_channels"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    return ArchConfig(**kwargs)


def _checkpoint_paths(path) -> tuple[Path, Path]:
    stem = Path(path)
    if stem.suffix == ".json":
        stem = stem.with_suffix("")
    return stem.with_suffix(stem.suffix + ".json"), \
        stem.with_suffix(stem.suffix + ".bin")


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """Write <stem>.json + <stem>.bin; returns the JSON path."""
    checkpoint.validate()
    header_path, payload_path = _checkpoint_paths(path)
    payload = b"".join(
        np.ascontiguousarray(p).astype(p.dtype.newbyteorder("<"),
                                       copy=False).tobytes()
        for p in checkpoint.params
    )
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": checkpoint.kind,
        "epoch": checkpoint.epoch,
        "val_metric": checkpoint.val_metric,
        "seed": checkpoint.seed,
        "uses_pretrained": checkpoint.uses_pretrained,
        "train_chip_ids": list(checkpoint.train_chip_ids),
        "arch": _arch_to_json(checkpoint.arch),
        "param_shapes": [list(p.shape) for p in checkpoint.params],
        "param_dtypes": [p.dtype.name for p in checkpoint.params],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    payload_path.write_bytes(payload)
    return header_path


def load_checkpoint(path) -> Checkpoint:
    """Bitwise-faithful inverse of save_checkpoint."""
    header_path, payload_path = _checkpoint_paths(path)
    if not header_path.exists():
        raise DataError(f"checkpoint header not found: {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint format version {version!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    raw = payload_path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != header["payload_sha256"]:
        raise FormatError(f"corrupt checkpoint payload: {payload_path}")
    params = []
    offset = 0
    for shape, dtype_name in zip(header["param_shapes"],
                                 header["param_dtypes"]):
        dtype = np.dtype(dtype_name).newbyteorder("<")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(
                f"unexpected end of checkpoint payload: {payload_path}")
        block = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)),
                              offset=offset)
        params.append(block.reshape(shape).astype(dtype_name, copy=True))
        offset += nbytes
    if offset != len(raw):
        raise FormatError(
            f"checkpoint payload has {len(raw) - offset} trailing bytes: "
            f"{payload_path}"
        )
    checkpoint = Checkpoint(
        kind=header["kind"],
        arch=_arch_from_json(header["arch"]),
        params=params,
        epoch=int(header["epoch"]),
        val_metric=float(header["val_metric"]),
        seed=int(header["seed"]),
        uses_pretrained=bool(header["uses_pretrained"]),
        train_chip_ids=list(header["train_chip_ids"]),
    )
    checkpoint.validate()
    return checkpoint
