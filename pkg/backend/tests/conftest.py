import os
import sys
import tempfile
from pathlib import Path

# Lab modules are imported by bare name, as the entry points do
BACKEND_DIR = Path(__file__).resolve().parent.parent
if str(BACKEND_DIR) not in sys.path:
    sys.path.insert(0, str(BACKEND_DIR))

# Keep API runs out of the working tree
os.environ.setdefault("LAB_OUTPUT_DIR", tempfile.mkdtemp(prefix="lab-runs-"))
