import sys

from snapfuzz.cli import main

sys.exit(main())
