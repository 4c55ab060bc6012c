import sys

from marmot.cli import main

sys.exit(main())
