import sys

from difftime.cli import main

sys.exit(main())
