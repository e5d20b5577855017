"""Make the shared scenario fixtures importable from any test module."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
