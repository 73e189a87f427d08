"""Out-of-domain intent detection: energy and baseline confidence scores,
margin-based training objectives, threshold calibration, and evaluation."""

__version__ = "0.1.0"
