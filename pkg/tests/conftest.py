import sys
from pathlib import Path

# lets test modules import the shared reference implementations in oracles.py
sys.path.insert(0, str(Path(__file__).parent))
