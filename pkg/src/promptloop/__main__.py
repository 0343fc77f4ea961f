import sys

from promptloop.cli import main

sys.exit(main())
