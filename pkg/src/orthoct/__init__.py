"""CT volumes from two orthogonal X-ray projections with a coarse-to-fine U-Net pipeline."""

__version__ = "0.1.0"
