"""Target sound detection: reference-conditioned frame-level detection of a sound in a mixture."""

__version__ = "0.1.0"
