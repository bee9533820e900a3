"""Audio-description event detection and script generation on state-space encoders."""

__version__ = "0.1.0"
