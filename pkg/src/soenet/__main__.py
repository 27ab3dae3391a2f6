import sys

from soenet.cli import main

sys.exit(main())
