"""Half-truth audio deepfake detection and splice localisation on a from-scratch numpy autograd."""

__version__ = "0.1.0"
