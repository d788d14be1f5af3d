"""Context-aware active query scheduling for wearable stress monitoring."""

__version__ = "0.1.0"
