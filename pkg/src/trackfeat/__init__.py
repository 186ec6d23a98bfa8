"""Two-view track-supervised keypoint detection and description at desk scale."""

__version__ = "0.1.0"
