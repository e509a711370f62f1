"""Allow ``python -m chord_churn``."""

import sys

from .cli import main

sys.exit(main())
