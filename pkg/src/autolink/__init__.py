"""Unsupervised keypoints and a learned keypoint graph from masked-image reconstruction."""

__version__ = "0.1.0"
