import sys

from shufflefl.cli import main

sys.exit(main())
