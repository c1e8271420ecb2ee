"""Open-vocabulary one-stage detection trained with hierarchical
vision-language distillation."""

__version__ = "0.1.0"
