"""PointCG-style self-supervised point cloud pretraining, desk scale."""

__version__ = "0.1.0"
