"""Adversarial dual distinct classifiers for unsupervised domain adaptation
on pre-extracted feature vectors."""

__version__ = "0.1.0"
