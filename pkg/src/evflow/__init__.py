"""Event-camera optical flow estimation with a 3D spatio-temporal event encoding."""

__version__ = "0.1.0"
