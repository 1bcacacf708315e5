import logging
import os
import sys
from pathlib import Path
from datetime import datetime
from typing import Optional

def setup_logger(name: str = "kws_nas", level: Optional[int] = None) -> logging.Logger:
    """Setup logger with file and console output"""

    if level is None:
        level = logging.getLevelName(os.getenv("KWS_LOG_LEVEL", "INFO").upper())
        if not isinstance(level, int):
            level = logging.INFO

    # Create logs directory
    logs_dir = Path(os.getenv("KWS_LOG_DIR", "logs"))
    logs_dir.mkdir(parents=True, exist_ok=True)

    # Create logger
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Clear existing handlers
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()
    logger.propagate = False

    # Create formatters
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # File handler
    log_file = logs_dir / f"kws_nas_{datetime.now().strftime('%Y%m%d')}.log"
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    return logger
