"""Multi-frame, multi-field, multi-space 3D single-object tracking at desk scale."""

__version__ = "0.1.0"
