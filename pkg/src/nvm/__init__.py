"""Neural volumetric memory: a numpy reimplementation with a synthetic terrain world."""

__version__ = "0.1.0"
