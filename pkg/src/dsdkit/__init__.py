"""Deepfake speech detection toolkit: dataset balance audits, three-stage
multi-loss training with Mahalanobis scoring, and EER/threshold evaluation."""

__version__ = "0.1.0"
