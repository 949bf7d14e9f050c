"""Multitask model pruning: magnitude/movement x element-wise/rank x global/local."""

__version__ = "0.1.0"
