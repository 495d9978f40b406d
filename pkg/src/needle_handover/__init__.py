"""Stereo needle pose estimation, presentation and grasp servoing, and a
seeded simulator for two-arm needle handover experiments."""

__version__ = "0.1.0"
