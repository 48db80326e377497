import sys

from bsn.cli import main

sys.exit(main())
