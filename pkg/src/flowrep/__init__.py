"""Flow-replication transport with real-socket and simulator backends."""

from .core import (
    FlowId,
    FsmEvent,
    InvalidStateError,
    MatchKind,
    ProtocolViolation,
    RepConfig,
    RepSocket,
    RepState,
    Scheme,
    ServerEngine,
    WaitingList,
    server_on_syn,
    transition,
)

__version__ = "0.1.0"

__all__ = [
    "FlowId",
    "FsmEvent",
    "InvalidStateError",
    "MatchKind",
    "ProtocolViolation",
    "RepConfig",
    "RepSocket",
    "RepState",
    "Scheme",
    "ServerEngine",
    "WaitingList",
    "server_on_syn",
    "transition",
    "__version__",
]
