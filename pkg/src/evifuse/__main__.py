import sys

from evifuse.cli import main

sys.exit(main())
