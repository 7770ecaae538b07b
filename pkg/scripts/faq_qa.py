#!/usr/bin/env python3
"""
Entry point for the FAQ anchoring and matching command line.

Usage: python scripts/faq_qa.py <subcommand> [options]
"""
import os
import sys

# Get the project root directory
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
# Add the project root to the Python path
sys.path.insert(0, project_root)

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
