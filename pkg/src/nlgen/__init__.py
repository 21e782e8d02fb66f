"""Trainable attention encoder-decoder generator for task-oriented dialogue."""

__version__ = "0.1.0"
