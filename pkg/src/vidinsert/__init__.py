"""Trajectory-controlled object insertion into short videos, at toy scale."""

__version__ = "0.1.0"
