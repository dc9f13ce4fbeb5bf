"""World-model-based end-to-end navigation at desk scale."""

__version__ = "0.1.0"
