"""Semi-supervised 2D keypoint estimation with dual networks, EMA reviewer
shadows, multi-level heatmap supervision, and keypoint patch mixing."""

__version__ = "0.1.0"
