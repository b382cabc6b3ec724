import sys

from billsim.cli import main

sys.exit(main())
