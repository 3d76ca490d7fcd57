import sys

from xappconflict.cli import main

sys.exit(main())
