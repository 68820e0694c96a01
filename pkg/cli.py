#!/usr/bin/env python3
"""
scenecompress CLI entry point.
Usage: python cli.py [command] [options]
"""

import sys

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
