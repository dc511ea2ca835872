import sys

from carfl.cli import main

sys.exit(main())
