"""Dual-branch transformer super-resolution GAN with a testable training harness."""

__version__ = "0.1.0"
