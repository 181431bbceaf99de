"""Coordinate-routed low-rank adapter banks with committed, lockable regions, on a toy frozen transformer."""

from .config import NIWFConfig
from .model import NIWFModel
from .protocol import run_sequential
from .region import CommitStore

__all__ = ["NIWFConfig", "NIWFModel", "CommitStore", "run_sequential"]
__version__ = "0.1.0"
