"""Desk-scale semi-supervised domain adaptation lab.

Three-stage pipeline on synthetic domain-shift benchmarks: minimax-entropy
baseline training, pseudo-label selection by feature distance to few-shot
target anchors, and label-noise-robust progressive self-training.
"""

__version__ = "0.1.0"
