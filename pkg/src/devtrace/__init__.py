"""Recording-device identification from spatial (supervector) and temporal
(MFCC) representations fused by attention."""

__version__ = "0.1.0"
