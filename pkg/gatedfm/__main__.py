import sys

from gatedfm.cli import main

sys.exit(main())
