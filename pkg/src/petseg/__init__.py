"""PET-only brain segmentation and amyloid SUVR quantification on numpy."""

__version__ = "0.1.0"
