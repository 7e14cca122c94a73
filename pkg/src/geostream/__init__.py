"""Streaming POI recommendation over a dynamic geo-human knowledge graph."""

from . import candidates, embed, harness, kgstore, legacy, metrics, numkit, policy, reward
from .errors import GeostreamError

__version__ = "0.1.0"

__all__ = [
    "candidates",
    "embed",
    "harness",
    "kgstore",
    "legacy",
    "metrics",
    "numkit",
    "policy",
    "reward",
    "GeostreamError",
    "__version__",
]
