"""Bitemporal SAR landslide mapping: chip classification pretraining,
frozen-embedding segmentation, metrics, and an ablation harness."""

__version__ = "0.1.0"
