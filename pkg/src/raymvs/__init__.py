"""Ray-based multi-view stereo with learned 1D implicit fields."""

__version__ = "0.1.0"
