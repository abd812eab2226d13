"""kpslam: symmetry- and uncertainty-aware object SLAM from semantic keypoints."""

__version__ = "0.1.0"
