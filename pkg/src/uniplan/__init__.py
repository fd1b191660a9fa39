import logging

__version__ = "0.3.0"

# simpy/matplotlib are chatty at DEBUG when UNIPLAN_LOG=DEBUG
logging.getLogger("matplotlib").setLevel(logging.WARNING)
