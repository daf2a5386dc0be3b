"""Network delivery: WebSocket frame ingestion plus a small REST surface."""

from .app import create_app

__all__ = ["create_app"]
