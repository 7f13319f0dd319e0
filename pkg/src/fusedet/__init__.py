"""fusedet: a desk-scale camera+LIDAR fusion detector and its image-side attacks."""

__version__ = "0.1.0"
