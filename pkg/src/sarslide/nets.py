"""Network architectures for chip classification and pixel segmentation.

Two models share one configuration object:

* ChipClassifier: a weight-shared twin-branch encoder-decoder.  Both the
  pre-event and the post-event image pass through the same U-Net-style
  network (residual encoder, skip-connected decoder) producing one embedding
  per image at full chip resolution.  The two embeddings are concatenated,
  pooled per channel, and a two-layer fully connected head emits one logit:
  the chip-level landslide score.
* SegmentationNet: a compact per-pixel model.  The image pair runs through a
  three-layer CNN; optionally the (frozen) classifier embeddings of both
  images are concatenated onto those features before a two-layer fusion head
  produces per-pixel logits.

All channel widths scale with ``width_scale`` so small test configurations
and the full-size configuration run the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .layers import (
    Conv2d,
    ConvBlock,
    Linear,
    ReLU,
    ResidualBlock,
    concat_channels,
    global_avg_pool,
    global_avg_pool_backward,
    named_param_slots,
    split_channels,
    upsample2x,
    upsample2x_backward,
)

_DEFAULT_BLOCKS = (3, 4, 6, 3)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture knobs; defaults give the full-size networks.

    width_scale multiplies every channel count (rounded, minimum 1), so small
    CI-size models and the ~21M/~1M parameter full models share one layout.
    """

    width_scale: float = 1.0
    embedding_channels: int = 64
    encoder_depth: int = 4
    input_channels: int = 2
    chip_size: int = 128
    base_channels: int = 64
    blocks_per_stage: tuple[int, ...] | None = None
    head_hidden: int = 128
    seg_channels: tuple[int, int, int] = (64, 128, 192)
    seg_fusion_channels: int = 256

    def validate(self) -> None:
        if not 0.0 < self.width_scale <= 1.0:
            raise ConfigError(f"width_scale must be in (0, 1], got {self.width_scale}")
        if self.encoder_depth < 2:
            raise ConfigError(f"encoder_depth must be >= 2, got {self.encoder_depth}")
        blocks = self.stage_blocks()
        if len(blocks) != self.encoder_depth or any(b < 1 for b in blocks):
            raise ConfigError(
                f"blocks_per_stage {blocks} must list >= 1 blocks for each of "
                f"{self.encoder_depth} stages"
            )
        down = 2 ** (self.encoder_depth - 1)
        if self.chip_size % down != 0 or self.chip_size // down < 2:
            raise ConfigError(
                f"chip_size {self.chip_size} not divisible into {self.encoder_depth} "
                "encoder resolutions"
            )
        if len(self.seg_channels) != 3:
            raise ConfigError(
                f"seg_channels must have 3 entries, got {self.seg_channels}"
            )
        for field in ("embedding_channels", "input_channels", "base_channels",
                      "head_hidden", "seg_fusion_channels"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1")

    def scaled(self, channels: int) -> int:
        return max(1, round(channels * self.width_scale))

    def stage_blocks(self) -> tuple[int, ...]:
        if self.blocks_per_stage is not None:
            return tuple(self.blocks_per_stage)
        if self.encoder_depth > len(_DEFAULT_BLOCKS):
            raise ConfigError(
                f"no default block counts for encoder_depth {self.encoder_depth}; "
                "set blocks_per_stage explicitly"
            )
        return _DEFAULT_BLOCKS[:self.encoder_depth]

    def encoder_channels(self) -> list[int]:
        return [self.scaled(self.base_channels * 2 ** s)
                for s in range(self.encoder_depth)]


def _check_images(x: np.ndarray, name: str, arch: ArchConfig) -> np.ndarray:
    """Validate a (C, H, W) or (B, C, H, W) image tensor, return it batched."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    expected = (arch.input_channels, arch.chip_size, arch.chip_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DataError(
            f"{name} must have shape {expected} or (B, *{expected}), got {x.shape}"
        )
    if not np.isfinite(x).all():
        raise DataError(f"{name} contains non-finite values")
    return x


class ChipClassifier:
    """Weight-shared twin-branch encoder-decoder with a pooled dense head.

    ``embed`` maps one image to an (embedding_channels, chip, chip) tensor;
    the same parameters serve both branches.  ``classify_from_embeddings``
    applies only the head, which lets callers reuse precomputed embeddings;
    ``forward`` composes the two.
    """

    def __init__(self, arch: ArchConfig, seed: int = 0):
        arch.validate()
        self.arch = arch
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        chans = arch.encoder_channels()
        self.emb_channels = arch.scaled(arch.embedding_channels)

        self.stem = ConvBlock(arch.input_channels, chans[0], rng=rng)
        self.enc_stages = []
        for s, n_blocks in enumerate(arch.stage_blocks()):
            blocks = []
            for b in range(n_blocks):
                c_in = chans[max(s - 1, 0)] if b == 0 else chans[s]
                stride = 2 if (b == 0 and s > 0) else 1
                blocks.append(ResidualBlock(c_in, chans[s], stride=stride, rng=rng))
            self.enc_stages.append(blocks)
        # One decoder step per downsampling: upsample, concat skip, fuse.
        self.dec_blocks = [
            ConvBlock(chans[s] + chans[s - 1], chans[s - 1], rng=rng)
            for s in range(arch.encoder_depth - 1, 0, -1)
        ]
        self.embed_conv = Conv2d(chans[0], self.emb_channels, 3, rng=rng)
        self.head_fc1 = Linear(2 * self.emb_channels, arch.scaled(arch.head_hidden),
                               rng=rng)
        self.head_act = ReLU()
        self.head_fc2 = Linear(arch.scaled(arch.head_hidden), 1, rng=rng)

    def sublayers(self):
        subs = [("stem", self.stem)]
        for s, blocks in enumerate(self.enc_stages):
            for b, block in enumerate(blocks):
                subs.append((f"enc{s}_{b}", block))
        for d, block in enumerate(self.dec_blocks):
            subs.append((f"dec{d}", block))
        subs += [("embed", self.embed_conv),
                 ("head_fc1", self.head_fc1), ("head_fc2", self.head_fc2)]
        return subs

    # -- embedding branch ---------------------------------------------------

    def embed_with_ctx(self, images):
        x = _check_images(images, "images", self.arch)
        y, stem_ctx = self.stem.forward(x)
        skips = []          # per-stage outputs, shallow to deep
        stage_ctxs = []
        for blocks in self.enc_stages:
            ctxs = []
            for block in blocks:
                y, c = block.forward(y)
                ctxs.append(c)
            stage_ctxs.append(ctxs)
            skips.append(y)
        dec_ctxs = []
        for d, block in enumerate(self.dec_blocks):
            skip = skips[-(d + 2)]          # next-shallower stage output
            up = upsample2x(y)
            cat = concat_channels([up, skip])
            y, c = block.forward(cat)
            dec_ctxs.append((c, up.shape[1], skip.shape[1]))
        emb, emb_ctx = self.embed_conv.forward(y)
        return emb, (stem_ctx, stage_ctxs, dec_ctxs, emb_ctx)

    def embed(self, images) -> np.ndarray:
        """Embedding tensor (B, embedding_channels, chip, chip) or unbatched."""
        batched = np.asarray(images).ndim == 4
        emb, _ = self.embed_with_ctx(images)
        return emb if batched else emb[0]

    def embed_backward(self, ctx, g_emb):
        """Backpropagate one branch; parameter grads accumulate in place."""
        stem_ctx, stage_ctxs, dec_ctxs, emb_ctx = ctx
        g = self.embed_conv.backward(emb_ctx, g_emb)
        # Decoder walk, deepest last; collect skip gradients per stage.
        skip_grads = [None] * len(self.enc_stages)
        for d in range(len(self.dec_blocks) - 1, -1, -1):
            c, up_ch, skip_ch = dec_ctxs[d]
            g_cat = self.dec_blocks[d].backward(c, g)
            g_up, g_skip = split_channels(g_cat, [up_ch, skip_ch])
            stage_idx = len(self.enc_stages) - (d + 2)
            skip_grads[stage_idx] = g_skip
            g = upsample2x_backward(g_up)
        # Encoder walk in reverse; add each stage's skip contribution.
        for s in range(len(self.enc_stages) - 1, -1, -1):
            if skip_grads[s] is not None:
                g = g + skip_grads[s]
            for block, c in zip(reversed(self.enc_stages[s]),
                                reversed(stage_ctxs[s])):
                g = block.backward(c, g)
        return self.stem.backward(stem_ctx, g)

    # -- head ---------------------------------------------------------------

    def head_with_ctx(self, emb_pre, emb_post):
        cat = concat_channels([emb_pre, emb_post])
        pooled, pool_shape = global_avg_pool(cat)
        h, c1 = self.head_fc1.forward(pooled)
        h, ca = self.head_act.forward(h)
        out, c2 = self.head_fc2.forward(h)
        return out[:, 0], (pool_shape, c1, ca, c2)

    def head_backward(self, ctx, g_logits):
        pool_shape, c1, ca, c2 = ctx
        g = self.head_fc2.backward(c2, g_logits[:, None])
        g = self.head_act.backward(ca, g)
        g = self.head_fc1.backward(c1, g)
        g_cat = global_avg_pool_backward(g, pool_shape)
        return split_channels(g_cat, [self.emb_channels, self.emb_channels])

    def classify_from_embeddings(self, emb_pre, emb_post) -> np.ndarray:
        """Chip logits (B,) from precomputed branch embeddings."""
        logits, _ = self.head_with_ctx(emb_pre, emb_post)
        return logits

    # -- full forward -------------------------------------------------------

    def forward(self, pre, post) -> np.ndarray:
        """Chip-level landslide logit; scalar for unbatched inputs."""
        batched = np.asarray(pre).ndim == 4
        emb_pre, _ = self.embed_with_ctx(pre)
        emb_post, _ = self.embed_with_ctx(post)
        logits = self.classify_from_embeddings(emb_pre, emb_post)
        return logits if batched else float(logits[0])


class SegmentationNet:
    """Per-pixel landslide model with optional frozen-embedding fusion.

    The pre/post pair is stacked on the channel axis and passed through three
    conv blocks; when ``uses_pretrained`` is set the caller supplies the two
    frozen classifier embeddings, which are concatenated onto the features
    before the two-layer fusion head.
    """

    def __init__(self, arch: ArchConfig, uses_pretrained: bool, seed: int = 0):
        arch.validate()
        self.arch = arch
        self.uses_pretrained = uses_pretrained
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        c1, c2, c3 = (arch.scaled(c) for c in arch.seg_channels)
        self.emb_channels = arch.scaled(arch.embedding_channels)

        self.body = [
            ConvBlock(2 * arch.input_channels, c1, rng=rng),
            ConvBlock(c1, c2, rng=rng),
            ConvBlock(c2, c3, rng=rng),
        ]
        fusion_in = c3 + (2 * self.emb_channels if uses_pretrained else 0)
        self.fuse = ConvBlock(fusion_in, arch.scaled(arch.seg_fusion_channels),
                              rng=rng)
        self.out_conv = Conv2d(arch.scaled(arch.seg_fusion_channels), 1, 3, rng=rng)
        self._body_out = c3

    def sublayers(self):
        subs = [(f"body{i}", b) for i, b in enumerate(self.body)]
        subs += [("fuse", self.fuse), ("out", self.out_conv)]
        return subs

    def _check_frozen(self, frozen, batch):
        if not self.uses_pretrained:
            if frozen is not None:
                raise DataError(
                    "unexpected frozen embeddings: this model was built with "
                    "uses_pretrained=False"
                )
            return None
        if frozen is None:
            raise DataError(
                "frozen embeddings required: this model was built with "
                "uses_pretrained=True"
            )
        emb_pre, emb_post = frozen
        expected = (batch, self.emb_channels, self.arch.chip_size, self.arch.chip_size)
        for name, emb in (("pre", emb_pre), ("post", emb_post)):
            emb = np.asarray(emb)
            if (emb.shape if emb.ndim == 4 else (1,) + emb.shape) != expected:
                raise DataError(
                    f"frozen {name} embedding must have shape {expected[1:]} per "
                    f"sample, got {emb.shape}"
                )
        return (np.asarray(emb_pre).reshape(expected),
                np.asarray(emb_post).reshape(expected))

    def forward_with_ctx(self, pre, post, frozen=None):
        pre = _check_images(pre, "pre", self.arch)
        post = _check_images(post, "post", self.arch)
        if pre.shape != post.shape:
            raise DataError(f"pre/post batch shapes differ: {pre.shape} vs {post.shape}")
        frozen = self._check_frozen(frozen, pre.shape[0])

        y = concat_channels([pre, post])
        body_ctxs = []
        for block in self.body:
            y, c = block.forward(y)
            body_ctxs.append(c)
        if frozen is not None:
            y = concat_channels([y, frozen[0], frozen[1]])
        y, fuse_ctx = self.fuse.forward(y)
        logits, out_ctx = self.out_conv.forward(y)
        return logits[:, 0], (body_ctxs, fuse_ctx, out_ctx)

    def forward(self, pre, post, frozen=None) -> np.ndarray:
        """Per-pixel logits, (B, chip, chip); unbatched input gives (chip, chip)."""
        batched = np.asarray(pre).ndim == 4
        logits, _ = self.forward_with_ctx(pre, post, frozen)
        return logits if batched else logits[0]

    def backward(self, ctx, g_logits):
        """Accumulate parameter grads; frozen embeddings receive no gradient."""
        body_ctxs, fuse_ctx, out_ctx = ctx
        g = self.out_conv.backward(out_ctx, g_logits[:, None])
        g = self.fuse.backward(fuse_ctx, g)
        if self.uses_pretrained:
            g = split_channels(
                g, [self._body_out, self.emb_channels, self.emb_channels])[0]
        for block, c in zip(reversed(self.body), reversed(body_ctxs)):
            g = block.backward(c, g)
        return g


# ---------------------------------------------------------------------------
# Construction and bookkeeping


def build_classifier(arch: ArchConfig, seed: int = 0) -> ChipClassifier:
    """Deterministic classifier initialization for the given seed."""
    return ChipClassifier(arch, seed=seed)


def build_segmenter(arch: ArchConfig, uses_pretrained: bool,
                    seed: int = 0) -> SegmentationNet:
    """Deterministic segmenter initialization for the given seed."""
    return SegmentationNet(arch, uses_pretrained, seed=seed)


def count_params(root) -> int:
    """Total number of scalar parameters in a layer tree."""
    return sum(getattr(layer, attr).size for _, layer, attr in named_param_slots(root))
