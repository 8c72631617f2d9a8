#!/usr/bin/env python
"""
BOWDA runner: synthetic data, training strategies, inference, evaluation
and analyses. See ``python scripts/run_bowda.py --help``.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from bowda.cli import main


if __name__ == "__main__":
    sys.exit(main())
