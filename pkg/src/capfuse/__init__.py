"""Multimodal e-commerce pipeline: context-conditioned captioning, ensemble
caption-quality gating, unified-text fusion, and task evaluation."""

__version__ = "0.1.0"
