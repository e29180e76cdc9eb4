"""Structure-aware spreadsheet understanding with tool-using model agents."""

__version__ = "0.1.0"
