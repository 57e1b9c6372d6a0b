import logging
import sys

from .cli import main
from .config import parse_log_level

logging.basicConfig(level=parse_log_level(), format="%(asctime)s %(levelname)-8s %(name)s: %(message)s")
sys.exit(main())
