"""Reuse-scheme scheduling compiler for a three-buffer CNN accelerator."""

__version__ = "0.1.0"
