"""Locality-aware autoencoder for image forgery detection.

Training, active mask annotation, and seen/unseen generalization
evaluation on synthetic forgery datasets with exact ground-truth masks.
"""

__version__ = "0.1.0"
