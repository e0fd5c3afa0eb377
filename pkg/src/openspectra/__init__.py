"""Open-set classification of 1-D spectra with rejection-aware training losses."""

__version__ = "0.1.0"
