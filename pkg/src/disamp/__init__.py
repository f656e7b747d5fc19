"""Tempered importance sampling with flow proposals trained by distillation."""

__version__ = "0.1.0"
