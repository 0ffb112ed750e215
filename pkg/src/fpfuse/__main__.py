import sys

from fpfuse.cli import main

sys.exit(main())
