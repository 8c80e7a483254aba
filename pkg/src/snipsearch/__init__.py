"""Search forum answers by code snippet and/or traceback."""

__version__ = "0.1.0"
