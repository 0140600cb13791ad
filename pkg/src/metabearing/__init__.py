"""Few-shot bearing fault diagnosis with model-agnostic meta-learning."""

__version__ = "0.1.0"
