"""Allows ``python -m roverteam``."""

import sys

from .cli import main

sys.exit(main())
