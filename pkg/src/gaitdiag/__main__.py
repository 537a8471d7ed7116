import sys

from gaitdiag.cli import main

sys.exit(main())
