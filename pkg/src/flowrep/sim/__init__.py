"""Deterministic discrete-event data center network simulator."""

from .calendar import EventCalendar
from .topology import (
    FiveTuple,
    Topology,
    build_fat_tree,
    build_leaf_spine,
    ecmp_route,
    tuple_hash,
)
from .session import SimNet

__all__ = [
    "EventCalendar",
    "FiveTuple",
    "SimNet",
    "Topology",
    "build_fat_tree",
    "build_leaf_spine",
    "ecmp_route",
    "tuple_hash",
]
