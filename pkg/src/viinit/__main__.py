import sys

from viinit.cli import main

sys.exit(main())
