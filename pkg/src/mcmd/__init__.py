"""Multi-channel multi-domain knowledge distillation for single-channel sleep staging."""
__version__ = "0.1.0"
