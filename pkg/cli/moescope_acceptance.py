#!/usr/bin/env python3
"""
Convenient script for checking the routing properties of trained toy models
"""

import sys

from src.moescope.acceptance import main

if __name__ == "__main__":
    sys.exit(main())
