"""Adversarial multi-binary (AMB) text classification on a small numpy autodiff engine."""

__version__ = "0.1.0"
