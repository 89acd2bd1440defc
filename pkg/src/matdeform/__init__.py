"""Material deformation finding for additive-manufacturing distortion compensation."""

__version__ = "0.1.0"
