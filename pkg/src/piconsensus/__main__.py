import sys

from piconsensus.cli import main

sys.exit(main())
