"""Sonar wall detection with ViT-augmented YOLOX detectors and offline knowledge distillation."""

from sonar_kd.app.main import main

__version__ = "0.1.0"

__all__ = ["__version__", "main"]
