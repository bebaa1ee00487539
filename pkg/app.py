"""
proxyfair command-line launcher

Equivalent to the `proxyfair` console script:

    python app.py ingest --config configs/default.yaml
    python app.py reproduce table2 --workers 4
"""

import sys

from modules.cli import main

if __name__ == "__main__":
    sys.exit(main())
