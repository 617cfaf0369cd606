"""flextend: automation for flexible assignment-extension policies."""

__version__ = "0.1.0"
