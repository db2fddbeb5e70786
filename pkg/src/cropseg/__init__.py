"""Domain-generalized binary crop segmentation with ensemble knowledge distillation."""

__version__ = "0.1.0"
