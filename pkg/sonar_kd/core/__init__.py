"""Autodiff engine, detector, augmentation, distillation and evaluation."""
