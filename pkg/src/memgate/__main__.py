import sys

from memgate.harness.cli import main

sys.exit(main())
