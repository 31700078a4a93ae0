"""Snapshot-based fuzzing of stateful message-sequence targets, simulated at desk scale."""

__version__ = "0.1.0"
