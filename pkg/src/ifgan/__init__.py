"""Identity-free facial expression recognition with a conditional GAN."""

__version__ = "0.1.0"
