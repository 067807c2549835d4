"""Programming exercise recommender with latent learning styles."""

__version__ = "0.1.0"
