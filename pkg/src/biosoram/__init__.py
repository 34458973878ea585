"""Oblivious RAM built from an isogrammic oblivious storage, on a simulated block server."""

from .adapters import IsoAVL, IsoQueue, IsoStack, ScanSet, make_storage
from .isoos import IsoChecker, IsogrammicOS, IsoKey, RestartRequired
from .oram import BiosORAM
from .params import Config, ConfigError, Params, derive_params
from .server import SimServer
from .smallos import SmallOS

__all__ = [
    "BiosORAM", "Config", "ConfigError", "IsoAVL", "IsoChecker", "IsoKey", "IsoQueue", "IsoStack",
    "IsogrammicOS", "Params", "RestartRequired", "ScanSet", "SimServer", "SmallOS", "derive_params", "make_storage",
]
__version__ = "0.1.0"
