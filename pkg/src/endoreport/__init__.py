"""Two-stage vision-language report generation for endoscopy-style data."""

__version__ = "0.1.0"
