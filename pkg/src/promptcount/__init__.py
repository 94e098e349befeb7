"""Interactive visual-prompt object detection and counting at desk scale."""

__version__ = "0.1.0"
