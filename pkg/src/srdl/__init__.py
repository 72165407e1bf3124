"""Self-referenced training engine with vanilla and distillation baselines."""

__version__ = "0.1.0"
