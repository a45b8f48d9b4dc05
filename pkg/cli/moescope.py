#!/usr/bin/env python3
"""
Convenient script for calling moescope
"""

import sys

from src.moescope.main import main

if __name__ == "__main__":
    sys.exit(main())
