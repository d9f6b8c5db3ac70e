import sys
from pynctr.cli import main

sys.exit(main())
