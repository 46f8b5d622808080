#!/usr/bin/env python3
"""
Main entry point for the compressive spectral classification toolkit.
"""
import sys

from cli.commands import main


if __name__ == "__main__":
    sys.exit(main())
