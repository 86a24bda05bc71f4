"""Speaker-conditioned CycleGAN voice conversion: one model for every direction among n speakers."""

__version__ = "0.1.0"
