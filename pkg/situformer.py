#!/usr/bin/env python3
"""
SituFormer - desk-scale grounded situation recognition

Generates a synthetic dataset, trains the noun model and the coarse and fine
verb models in separate stages, predicts and scores grounded frames.
"""

import sys

from lib.cli import main

if __name__ == "__main__":
    sys.exit(main())
