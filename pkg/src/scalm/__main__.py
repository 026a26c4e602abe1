import sys

from scalm.cli import main

sys.exit(main())
