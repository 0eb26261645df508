import sys
from pathlib import Path

# Test helpers live next to the tests; make them importable regardless of
# how pytest was invoked.
sys.path.insert(0, str(Path(__file__).parent))
