"""Desk-scale LiDAR BEV object detection with range-aware attention
convolutions, trained end-to-end on synthetic scenes."""

__version__ = "0.1.0"
