import logging
import sys

from config import LOG_LEVEL, LOG_FILE
from registration.cli import run

# Configure logging; stdout stays clean for command output such as `eval --csv`
handlers = [logging.StreamHandler(stream=sys.stderr)]
if LOG_FILE:
    handlers.append(logging.FileHandler(LOG_FILE, encoding='utf-8'))

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format='%(message)s',
    handlers=handlers
)
logger = logging.getLogger(__name__)

if __name__ == "__main__":
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(130)
