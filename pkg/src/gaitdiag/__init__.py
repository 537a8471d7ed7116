"""Wearable gait diagnosis: IMU feature extraction, an int8-quantizable MLP
gait classifier and a K-means anomaly scorer, with a streaming runtime."""

from gaitdiag.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
