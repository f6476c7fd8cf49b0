"""Quantization-aware training with Jacobian regularization and adversarial evaluation."""

__version__ = "0.1.0"
