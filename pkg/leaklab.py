#!/usr/bin/env python3
"""Convenience launcher: ``python leaklab.py demo``."""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
