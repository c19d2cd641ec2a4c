"""Semi-supervised 3D segmentation with a (K+1)-class GAN discriminator."""

__version__ = "0.1.0"
