"""Online classification service: HTTP API over the embedding pipeline."""

from .app import create_app
from .state import ServiceConfig, ServiceState, Snapshot

__all__ = ["create_app", "ServiceConfig", "ServiceState", "Snapshot"]
