"""Simulator and reference kernels for serving many LoRA adapters on one base model."""

__version__ = "0.1.0"
