import sys

from repcat.cli import main

sys.exit(main())
