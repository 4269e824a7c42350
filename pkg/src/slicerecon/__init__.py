"""Slice-stack 3D reconstruction by two-stage registration."""

__version__ = "0.1.0"
