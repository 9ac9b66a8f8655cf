"""Allow `python -m cochainfem`."""
import sys

from cochainfem.main import main

sys.exit(main())
