"""Prefix tuning and adaptive (gated) prefix tuning on a small numpy transformer."""

__version__ = "0.1.0"
