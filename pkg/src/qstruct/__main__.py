import sys

from qstruct.cli import main

sys.exit(main())
