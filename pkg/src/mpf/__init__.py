"""Toolkit for mining, evaluating and mitigating fooling master images
against contrastive image-text dual encoders."""

__version__ = "0.1.0"
