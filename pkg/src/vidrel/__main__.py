"""Allow `python -m vidrel` as an alternative to the console script."""

import sys

from vidrel.cli import main

if __name__ == "__main__":
    sys.exit(main())
