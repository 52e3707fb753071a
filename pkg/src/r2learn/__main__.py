import sys

from r2learn.cli import main

sys.exit(main())
