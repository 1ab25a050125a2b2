"""HTTP service wrapping the editing core."""
from .app import create_app

__all__ = ["create_app"]
