"""Extractor bridge: turns images into the feature manifest + tensor files the
grounding pipeline consumes."""

__version__ = "0.1.0"


class BridgeError(RuntimeError):
    pass
