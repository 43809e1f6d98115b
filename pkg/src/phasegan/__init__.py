"""Desk-scale GAN image translation with interleaved semantic training phases."""

__version__ = "0.1.0"
