"""Multimodal video similarity: pretraining, rank-normalised finetuning, ensembling."""

__version__ = "0.1.0"
