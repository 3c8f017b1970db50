import sys

from selfens.cli import main

sys.exit(main())
