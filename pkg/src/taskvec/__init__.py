"""Task-vector extraction, injection and analysis for causal language models."""

__version__ = "0.1.0"
