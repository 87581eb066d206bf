"""Cross-modal contrastive pretraining for OCT needle-tip tissue classification."""

__version__ = "0.1.0"
