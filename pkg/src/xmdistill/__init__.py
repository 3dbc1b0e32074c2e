"""Cross-modal embedding distillation: train a sequence encoder to reproduce a
frozen embedder's sentence vectors, then probe what it learned."""

__version__ = "0.1.0"
