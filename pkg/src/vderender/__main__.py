import sys

from .fitcli.cli import main

sys.exit(main())
