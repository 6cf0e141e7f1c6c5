"""Top-level package for the gradient leakage lab.

This file makes `src` importable as a package during testing and runtime.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
