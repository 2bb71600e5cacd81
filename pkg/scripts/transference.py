#!/usr/bin/env python3
"""Script to generate datasets, train with transference measurement or IT-MTL selection, recommend task groupings and probe loss landscapes"""

import sys
from pathlib import Path

# HACK to make sure the transference_tools package is findable
sys.path.append(str(Path(__file__).resolve().parent.parent))
from transference_tools import cli


if __name__ == '__main__':
	sys.exit(cli.main())
