"""genshield: privacy-preserving transformation of motion-sensor time-series.

Train a multi-task classifier (activity + gender), then train an
autoencoder against the frozen classifier so that transformed windows keep
activity recognition accurate while driving gender inference to chance,
and audit the residual leakage with DTW-based k-NN and a retrained probe.
"""

from .estimator import MultiTaskActivityGenderClassifier
from .guardian import GenderNeutralizingTransformer

__all__ = [
    "MultiTaskActivityGenderClassifier",
    "GenderNeutralizingTransformer",
]

__version__ = "0.1.0"
