"""Metadata-driven positive and negative pair selection for momentum contrastive pretraining."""

__version__ = "0.1.0"
