"""Facial landmark detection workbench: heatmap and regression detectors on a small numpy autodiff engine."""

__version__ = "0.1.0"
