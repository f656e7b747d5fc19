"""Benchmark targets: sinusoid, M/G/1 queue, Lorenz-63 SDE."""

from . import lorenz, mg1, sinusoid

__all__ = ["sinusoid", "mg1", "lorenz"]
