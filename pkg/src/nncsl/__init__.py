"""Continual semi-supervised learning with soft nearest-neighbor pseudo-labels."""
