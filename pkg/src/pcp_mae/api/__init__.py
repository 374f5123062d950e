"""API package for PCP-MAE."""

from .server import app, create_app

__all__ = ["app", "create_app"]
