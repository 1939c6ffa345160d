"""Wafer defect detection and defect Q&A on synthetic SEM-like images."""

__version__ = "0.1.0"
