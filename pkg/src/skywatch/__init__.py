"""UAV crime-deterrence placement and lossy distributed-inference simulators."""

__version__ = "0.1.0"
