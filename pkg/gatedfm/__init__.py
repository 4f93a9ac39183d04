"""Feature-interaction search and retraining for factorization-machine CTR models."""

__version__ = "0.1.0"
