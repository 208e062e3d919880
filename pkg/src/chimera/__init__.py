"""Noisy-label learning with contrastive pretraining on mixed-up views,
GMM noise detection and MixMatch-style correction."""

__version__ = "0.1.0"
