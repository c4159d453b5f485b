"""Flat-minimum training toolkit at desk scale.

A small numpy autodiff engine, a scaled-down Wide PyramidNet with ShakeDrop,
an adaptive plateau learning-rate scheduler, EMA self-distillation, the
four-stage training pipeline and loss-landscape probes.
"""
__version__ = "0.1.0"
