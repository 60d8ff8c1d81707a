#!/usr/bin/env python3
"""
Main entry point for the Sundman reparametrization toolkit
"""

import os
import sys

# Add the repository root to the Python path so `src` imports resolve
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.apps.cli import main

if __name__ == "__main__":
    sys.exit(main())
