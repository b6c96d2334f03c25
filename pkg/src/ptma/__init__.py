"""Cross-view online action detection with a probabilistic latent branch and temporal masked attention."""

__version__ = "0.1.0"
