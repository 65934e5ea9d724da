#!/usr/bin/env python3
"""
Lung Screening Benchmark - Main Entry Point
Runs the command line interface from a source checkout
"""

import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from lung_screening_benchmark.cli import main

if __name__ == "__main__":
    sys.exit(main())
