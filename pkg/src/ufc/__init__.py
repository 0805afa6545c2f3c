"""Cluster-guided contrastive pretraining for few-label segmentation, on numpy."""

__version__ = "0.1.0"
