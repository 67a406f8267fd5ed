"""Reachability-based verification of high-level driving decisions."""
from .actions import ActionPair, Lat, Lon
from .decision import FAIL_SAFE, decide
from .reach import verify
from .rules import safe_distance

__all__ = ["ActionPair", "Lat", "Lon", "FAIL_SAFE", "decide", "verify", "safe_distance"]
__version__ = "0.1.0"
