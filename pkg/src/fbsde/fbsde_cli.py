#!/usr/bin/env python3
"""
fbsde CLI - Entry point wrapper

This script provides the `fbsde` command when the package is not installed.

Usage:
    python src/fbsde/fbsde_cli.py <command> [args]
    # Or if symlinked as 'fbsde':
    fbsde <command> [args]
"""

import sys
from pathlib import Path

# Add src/ to path so 'fbsde' package is importable when run directly
src_dir = Path(__file__).resolve().parent.parent
if str(src_dir) not in sys.path:
    sys.path.insert(0, str(src_dir))

from fbsde.cli import main

if __name__ == "__main__":
    main()
