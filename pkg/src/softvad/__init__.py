"""Self-adaptive soft VAD for deep speaker verification."""

__version__ = "0.1.0"
