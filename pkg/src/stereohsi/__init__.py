"""Stereo hyperspectral tissue classification pipeline."""
