"""Desk-scale wildlife-tag telemetry stack.

Simulated flash media with power-loss injection, a crash-safe append-only
log of typed items, the compact radio item protocol with acknowledged
upload, tag and base-station runtimes under a deterministic lossy-channel
simulator, and the sensor-data reconstruction pipeline.
"""

from .errors import (DefinitionError, LogError, LogFullError, MediaError,
                     MediaFailedError, PowerLossError, ScenarioError,
                     StoreError, WildtagError, WireError)

__version__ = "0.1.0"

__all__ = [
    "DefinitionError", "LogError", "LogFullError", "MediaError",
    "MediaFailedError", "PowerLossError", "ScenarioError", "StoreError",
    "WildtagError", "WireError", "__version__",
]
