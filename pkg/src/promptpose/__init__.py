"""Promptable zero-shot 6D object pose estimation over language-embedded point clouds."""

__version__ = "0.1.0"
