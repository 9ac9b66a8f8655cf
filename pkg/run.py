#!/usr/bin/env python3
"""
CochainFEM - Entry Point
========================
Wrapper to run experiments from the project root.
"""
import sys

from cochainfem.main import main

if __name__ == "__main__":
    sys.exit(main())
