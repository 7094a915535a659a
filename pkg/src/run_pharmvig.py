"""
Run the pharmvig command line from the src directory.

Usage:
    cd src
    python run_pharmvig.py --config ../config/toolkit.json prepare --task sentiment
    python run_pharmvig.py train --task sentiment --model cb-d --epochs 10
"""
import sys

from pharmvig.cli import main

if __name__ == "__main__":
    sys.exit(main())
