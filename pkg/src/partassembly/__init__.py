"""Part assembly with instance-encoded transformers."""

__version__ = "0.1.0"
