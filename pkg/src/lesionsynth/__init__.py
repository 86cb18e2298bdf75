"""Lesion synthesis from intensity-level masks for T1/FLAIR brain MRI."""

__version__ = "0.1.0"
