"""Zero-shot depth and all-in-focus recovery from phase-coded images."""
__version__ = "0.1.0"
