import sys

from coldstart.cli import main

sys.exit(main())
