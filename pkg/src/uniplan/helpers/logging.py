import logging
import os

LOG_LEVEL_ENV = "UNIPLAN_LOG"


def get_logger(module_name):
    logger = logging.getLogger(f"uniplan.{module_name}")
    level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logger.setLevel(getattr(logging, level, logging.WARNING))

    # repeated get_logger calls must not stack handlers
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.propagate = False

    return logger
