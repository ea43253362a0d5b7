"""Multi-modal few-shot detection with rich-text prototypes."""

__version__ = "0.1.0"
