"""Transport-agnostic flow-replication engine.

A replicated connection is one logical byte stream carried over up to two
underlying reliable duplex streams ("legs") that share the client address
and client source port but target two distinct server ports.  This module
owns everything that is independent of how legs are actually transported:
the four-state lifecycle machine, write replication with an archive for the
not-yet-arrived leg, receive-side deduplication, and the server-side waiting
list that pairs a replica leg with its original.

Legs are duck-typed: anything with ``write(data)``, ``end()`` and ``reset()``
works.  The transport adapter (real sockets or the simulator) drives a
:class:`RepSocket` by calling its ``on_leg_*`` methods; the socket emits
``connected`` / ``data`` / ``end`` / ``error`` callbacks to the application.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional


class FlowId(NamedTuple):
    """Identity of one logical flow: client address + client source port.

    Both legs of a replicated connection carry the same FlowId; they differ
    only in the server port they target.  Equality of FlowId is the sole
    matching criterion on the server.
    """

    address: str
    port: int


class Scheme(enum.Enum):
    PLAIN = "plain"
    REPFLOW = "repflow"
    REPSYN = "repsyn"

    def __str__(self) -> str:
        return self.value


class RepState(enum.Enum):
    ONE_CONN = "ONE_CONN"    # one leg open, the other pending
    DUP_CONN = "DUP_CONN"    # both legs open, I/O replicated
    CHOSEN = "CHOSEN"        # exactly one leg remains valid
    ENDED = "ENDED"          # absorbing


class FsmEvent(enum.Enum):
    SECOND_SYN_MATCHED = "second_syn_matched"
    LEG_ERROR = "leg_error"
    WL_TIMEOUT = "wl_timeout"
    ARCHIVE_OVERFLOW = "archive_overflow"
    BOTH_LEGS_CLOSED = "both_legs_closed"


class ProtocolViolation(Exception):
    """A (state, event) pair outside the legal transition table."""


class InvalidStateError(Exception):
    """Operation not permitted in the socket's current state."""


# Legal transitions.  Everything not listed here is a protocol violation;
# in particular ENDED is absorbing and accepts no further events.
_TRANSITIONS: dict[tuple[RepState, FsmEvent], RepState] = {
    (RepState.ONE_CONN, FsmEvent.SECOND_SYN_MATCHED): RepState.DUP_CONN,
    (RepState.ONE_CONN, FsmEvent.LEG_ERROR): RepState.CHOSEN,
    (RepState.ONE_CONN, FsmEvent.WL_TIMEOUT): RepState.CHOSEN,
    (RepState.ONE_CONN, FsmEvent.ARCHIVE_OVERFLOW): RepState.CHOSEN,
    (RepState.ONE_CONN, FsmEvent.BOTH_LEGS_CLOSED): RepState.ENDED,
    (RepState.DUP_CONN, FsmEvent.LEG_ERROR): RepState.CHOSEN,
    (RepState.DUP_CONN, FsmEvent.BOTH_LEGS_CLOSED): RepState.ENDED,
    (RepState.CHOSEN, FsmEvent.LEG_ERROR): RepState.CHOSEN,
    (RepState.CHOSEN, FsmEvent.BOTH_LEGS_CLOSED): RepState.ENDED,
}


def transition(state: RepState, event: FsmEvent) -> RepState:
    """Pure successor function of the replication lifecycle machine.

    Raises :class:`ProtocolViolation` for illegal pairs, e.g. a second SYN
    match while already in DUP_CONN, or any event after ENDED.
    """
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise ProtocolViolation(f"illegal transition: {state.value} + {event.value}") from None


@dataclass
class RepConfig:
    """Tuning knobs shared by both transport backends.

    ``wl_timeout`` is in seconds; backends with a different clock convert it
    (the simulator uses integer nanoseconds internally).
    """

    wl_timeout: float = 0.2            # seconds; real-socket profile uses 3.0
    archive_threshold: int = 64 * 1024
    mice_threshold: int = 100_000      # policy hint: replicate only below this
    repsyn: bool = False
    base_port: int = 9000              # replica port is base_port + 1
    nodelay: bool = True               # real sockets only
    flow_token_fallback: bool = False  # distinct-source-port deviation, off by default

    def __post_init__(self) -> None:
        if self.wl_timeout <= 0:
            raise ValueError("wl_timeout must be positive")
        if self.archive_threshold <= 0:
            raise ValueError("archive_threshold must be positive")


class _Leg:
    __slots__ = ("handle", "established", "open", "dead", "recv", "sent",
                 "peer_eof", "fin_sent")

    def __init__(self, handle=None) -> None:
        self.handle = handle
        self.established = False
        self.open = False
        self.dead = False     # errored, reset, or fully closed
        self.recv = 0         # bytes received on this leg so far
        self.sent = 0         # bytes written on this leg so far
        self.peer_eof = False
        self.fin_sent = False

    def __repr__(self) -> str:  # debugging aid
        return (f"_Leg(est={self.established} open={self.open} dead={self.dead} "
                f"recv={self.recv} sent={self.sent})")


class RepSocket:
    """One logical replicated connection over up to two legs.

    Event callbacks (assign plain callables):

    * ``on_connected()`` -- first leg established, socket usable
    * ``on_data(chunk)`` -- new in-order payload, each byte exactly once
    * ``on_end()``       -- peer finished the stream gracefully
    * ``on_error(exc)``  -- connection failed with no surviving leg
    """

    CLIENT = "client"
    SERVER = "server"

    def __init__(self, flow_id: FlowId, role: str, mode: Scheme, config: RepConfig):
        self.flow_id = flow_id
        self.role = role
        self.mode = mode
        self.config = config
        self.state = RepState.ONE_CONN
        self.legs: list[Optional[_Leg]] = [None, None]
        self.delivered = 0                  # bytes surfaced to the application
        self.chosen: Optional[int] = None   # leg index once state is CHOSEN
        self.archive: Optional[bytearray] = bytearray()
        self._app_ended = False
        self._end_emitted = False
        self._error_emitted = False
        self.on_connected: Optional[Callable[[], None]] = None
        self.on_data: Optional[Callable[[bytes], None]] = None
        self.on_end: Optional[Callable[[], None]] = None
        self.on_error: Optional[Callable[[BaseException], None]] = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def client(cls, flow_id: FlowId, mode: Scheme, config: RepConfig) -> "RepSocket":
        return cls(flow_id, cls.CLIENT, mode, config)

    @classmethod
    def server(cls, flow_id: FlowId, config: RepConfig, first_leg) -> "RepSocket":
        """Server sockets are born at the first SYN with that leg attached."""
        sock = cls(flow_id, cls.SERVER, Scheme.REPFLOW, config)
        sock.attach_leg(0, first_leg, established=True)
        return sock

    def attach_leg(self, leg_id: int, handle, established: bool = False) -> None:
        if self.legs[leg_id] is not None:
            raise InvalidStateError(f"leg {leg_id} already attached")
        leg = _Leg(handle)
        self.legs[leg_id] = leg
        if established:
            leg.established = True
            leg.open = True

    # -- writes ---------------------------------------------------------------

    def write(self, data) -> None:
        """Write application bytes, replicated according to the current state."""
        if self.state is RepState.ENDED:
            raise InvalidStateError("write on an ended socket")
        n = len(data)
        if n == 0:
            return
        if self.state is RepState.DUP_CONN:
            for leg in self.legs:
                leg.handle.write(data)
                leg.sent += n
        elif self.state is RepState.CHOSEN:
            leg = self.legs[self.chosen]
            if not leg.established:
                raise InvalidStateError("write before the chosen leg established")
            leg.handle.write(data)
            leg.sent += n
        else:  # ONE_CONN: write through plus archive for the pending leg
            if len(self.archive) + n > self.config.archive_threshold:
                if self._sole_open_leg() is None:
                    raise InvalidStateError("write overflow before any leg established")
                self._apply(FsmEvent.ARCHIVE_OVERFLOW)
                leg = self.legs[self.chosen]
                leg.handle.write(data)
                leg.sent += n
            else:
                self.archive.extend(data)
                for leg in self.legs:
                    if leg is not None and leg.established and leg.open:
                        leg.handle.write(data)
                        leg.sent += n

    def end(self) -> None:
        """Close the write side gracefully on every current and future leg."""
        if self._app_ended:
            return
        self._app_ended = True
        for leg in self.legs:
            if leg is not None and leg.open and not leg.fin_sent:
                leg.fin_sent = True
                leg.handle.end()

    def reset(self) -> None:
        """Abortively tear down every leg."""
        for leg in self.legs:
            if leg is not None and leg.open:
                leg.open = False
                leg.dead = True
                leg.handle.reset()
        self.state = RepState.ENDED

    # -- leg events (called by the transport adapter) --------------------------

    def on_leg_connected(self, leg_id: int) -> None:
        leg = self.legs[leg_id]
        if leg is None or leg.dead or leg.established:
            return
        leg.established = True
        leg.open = True
        first = self._established_count() == 1
        if self.state is RepState.CHOSEN:
            if self.chosen == leg_id:
                self._catch_up(leg)
                if first:
                    self._emit_connected()
            else:
                # Late loser: archive overflow or REPSYN already picked a leg.
                self._abandon(leg)
            return
        if self.state is RepState.ENDED:
            self._abandon(leg)
            return
        if self.role == self.CLIENT and self.mode in (Scheme.REPSYN, Scheme.PLAIN):
            # First handshake to complete becomes the sole data leg.
            self.state = RepState.CHOSEN
            self.chosen = leg_id
            self._catch_up(leg)
            self._emit_connected()
            return
        if first:
            self._catch_up(leg)
            self._emit_connected()
        else:
            self._apply(FsmEvent.SECOND_SYN_MATCHED)
            self._catch_up(leg)

    def attach_second_leg(self, handle) -> None:
        """Server side: bind the matched replica leg (trigger 1)."""
        slot = 1 if self.legs[0] is not None else 0
        self.attach_leg(slot, handle, established=True)
        self._apply(FsmEvent.SECOND_SYN_MATCHED)
        self._catch_up(self.legs[slot])

    def on_leg_data(self, leg_id: int, chunk) -> bytes:
        """Deduplicate one in-order chunk from a leg; returns bytes delivered.

        ``chunk`` must be the next in-order segment of that leg's stream.  The
        application sees exactly the suffix beyond what any leg delivered
        before; a slower leg's duplicate bytes are silently absorbed.
        """
        leg = self.legs[leg_id]
        start = leg.recv
        end = start + len(chunk)
        leg.recv = end
        if end <= self.delivered:
            return b""
        fresh = bytes(chunk[self.delivered - start:]) if start < self.delivered else bytes(chunk)
        self.delivered = end
        if self.on_data is not None:
            self.on_data(fresh)
        return fresh

    def on_leg_end(self, leg_id: int) -> None:
        """Peer finished writing on this leg (graceful EOF).

        The leg stays writable (half-close); only a full close or an error
        invalidates it.
        """
        leg = self.legs[leg_id]
        if leg is None or leg.dead:
            return
        leg.peer_eof = True
        if not self._end_emitted and leg.recv == self.delivered:
            self._end_emitted = True
            if self.on_end is not None:
                self.on_end()

    def on_leg_closed(self, leg_id: int) -> None:
        """Transport under this leg closed cleanly (both directions done)."""
        self._leg_gone(leg_id, graceful=True)

    def on_leg_error(self, leg_id: int, exc: Optional[BaseException] = None) -> None:
        """This leg failed (reset by peer, refused, or transport exception)."""
        self._leg_gone(leg_id, graceful=False, exc=exc)

    def wl_timed_out(self) -> None:
        """Waiting-list expiry: continue as standard TCP on the open leg."""
        if self.state is RepState.ONE_CONN:
            self._apply(FsmEvent.WL_TIMEOUT)

    # -- byte accounting -------------------------------------------------------

    def leg_received(self, leg_id: int) -> int:
        leg = self.legs[leg_id]
        return 0 if leg is None else leg.recv

    def leg_written(self, leg_id: int) -> int:
        leg = self.legs[leg_id]
        return 0 if leg is None else leg.sent

    def legs_established(self) -> int:
        return self._established_count()

    # -- internals --------------------------------------------------------------

    def _apply(self, event: FsmEvent) -> None:
        self.state = transition(self.state, event)
        if self.state is RepState.CHOSEN:
            if event is FsmEvent.ARCHIVE_OVERFLOW:
                # Data already went out on the open leg; the pending leg can
                # never catch up, so the archive is dropped and a late match
                # will be accepted then reset by the server engine.
                self.chosen = self._sole_open_leg()
                self.archive = None
            elif self.chosen is None or not self._leg_viable(self.chosen):
                self.chosen = self._surviving_leg()
            if self.chosen is not None:
                leg = self.legs[self.chosen]
                if leg is not None and leg.established and leg.open:
                    self._catch_up(leg)

    def _leg_viable(self, leg_id: Optional[int]) -> bool:
        if leg_id is None:
            return False
        leg = self.legs[leg_id]
        return leg is not None and not leg.dead and (leg.open or not leg.established)

    def _surviving_leg(self) -> Optional[int]:
        for i, leg in enumerate(self.legs):
            if leg is not None and leg.open:
                return i
        for i, leg in enumerate(self.legs):
            if leg is not None and not leg.established and not leg.dead:
                return i  # still connecting; may yet become the data leg
        return None

    def _sole_open_leg(self) -> Optional[int]:
        for i, leg in enumerate(self.legs):
            if leg is not None and leg.open:
                return i
        return None

    def _established_count(self) -> int:
        return sum(1 for leg in self.legs if leg is not None and leg.established)

    def _open_count(self) -> int:
        return sum(1 for leg in self.legs if leg is not None and leg.open)

    def _catch_up(self, leg: _Leg) -> None:
        # Bring a newly valid leg up to the full written history, then stop
        # archiving once no pending slot remains.
        if self.archive is not None and leg.sent < len(self.archive):
            leg.handle.write(bytes(self.archive[leg.sent:]))
            leg.sent = len(self.archive)
        if self.state is not RepState.ONE_CONN:
            self.archive = None
        if self._app_ended and leg.open and not leg.fin_sent:
            leg.fin_sent = True
            leg.handle.end()

    def _abandon(self, leg: _Leg) -> None:
        leg.open = False
        leg.dead = True
        leg.handle.reset()

    def _leg_gone(self, leg_id: int, graceful: bool,
                  exc: Optional[BaseException] = None) -> None:
        leg = self.legs[leg_id]
        if leg is None or leg.dead:
            return
        leg.dead = True
        leg.open = False
        if self.state is RepState.ENDED:
            return
        pending = self._has_pending_leg()
        if pending and graceful and self._app_ended:
            # The stream already completed on this leg; a leg that never
            # finished connecting must not be adopted later (its replayed
            # writes would resurface as a spurious fresh connection).
            for other in self.legs:
                if other is not None and not other.established and not other.dead:
                    other.dead = True
                    other.handle.reset()
            pending = False
        if self._open_count() == 0 and not pending:
            self._apply(FsmEvent.BOTH_LEGS_CLOSED)
            if not graceful and not self._end_emitted and not self._error_emitted:
                self._error_emitted = True
                if self.on_error is not None:
                    self.on_error(exc or ConnectionError("all legs failed"))
        else:
            # One leg invalidated; the survivor (possibly still connecting,
            # possibly the very same chosen leg) carries the stream on.
            self._apply(FsmEvent.LEG_ERROR)

    def _has_pending_leg(self) -> bool:
        if self.role != self.CLIENT:
            return False
        return any(leg is not None and not leg.established and not leg.dead
                   for leg in self.legs)

    def _emit_connected(self) -> None:
        if self.on_connected is not None:
            self.on_connected()

    def __repr__(self) -> str:
        return (f"RepSocket({self.flow_id.address}:{self.flow_id.port} {self.role} "
                f"{self.mode.value} {self.state.value})")


# -- server side ----------------------------------------------------------------


class MatchKind(enum.Enum):
    NEW = "new"              # no match: socket created and pushed
    MATCHED = "matched"      # fresh entry found: attach as second leg
    RESET_LATE = "reset"     # entry found but socket already left ONE_CONN


@dataclass
class MatchResult:
    kind: MatchKind
    socket: Optional[RepSocket]


@dataclass
class _Entry:
    flow_id: FlowId
    deadline: float
    handle: RepSocket


class WaitingList:
    """Server registry of half-matched replicated connections, with TTL expiry.

    ``timeout`` and the ``now`` arguments share whatever clock the caller
    uses; the list only compares and adds them.  Entries expire in push
    order (the timeout is constant), so a tick only touches due entries.
    """

    def __init__(self, timeout) -> None:
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self.timeout = timeout
        self._entries: dict[FlowId, _Entry] = {}
        self._order: deque[_Entry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, flow_id: FlowId) -> bool:
        return flow_id in self._entries

    def push(self, flow_id: FlowId, handle: RepSocket, now) -> None:
        if flow_id in self._entries:
            raise ProtocolViolation(f"duplicate waiting-list entry for {flow_id}")
        entry = _Entry(flow_id, now + self.timeout, handle)
        self._entries[flow_id] = entry
        self._order.append(entry)

    def pop(self, flow_id: FlowId, now) -> Optional[_Entry]:
        """Return and remove a fresh entry; expired entries never match.

        A stale entry encountered here is expired on the spot, exactly as a
        tick at the same instant would have done.
        """
        entry = self._entries.get(flow_id)
        if entry is None:
            return None
        del self._entries[flow_id]
        if entry.deadline <= now:
            entry.handle.wl_timed_out()
            return None
        return entry

    def tick(self, now) -> list[FlowId]:
        """Expire every entry whose deadline has passed (closed interval).

        Each expired socket still in ONE_CONN continues as standard TCP via
        the wl_timeout transition.  Returns the expired FlowIds.
        """
        expired = []
        order = self._order
        entries = self._entries
        while order and order[0].deadline <= now:
            entry = order.popleft()
            if entries.get(entry.flow_id) is entry:
                del entries[entry.flow_id]
                entry.handle.wl_timed_out()
                expired.append(entry.flow_id)
        return expired


def server_on_syn(waiting: WaitingList, flow_id: FlowId, now,
                  make_socket: Callable[[], RepSocket]) -> MatchResult:
    """Classify one accepted handshake against the waiting list.

    * no fresh entry: a new server socket is created (usable immediately) and
      pushed with deadline ``now + timeout``;
    * fresh entry with the socket still in ONE_CONN: the entry is deleted and
      the caller must attach the new leg as the second leg;
    * fresh entry whose socket left ONE_CONN but is still alive (archive
      overflow kept it listed): accept then reset the late leg;
    * fresh entry whose socket already ENDED: the client port pair is being
      reused, so this is a brand-new flow.
    """
    entry = waiting.pop(flow_id, now)
    if entry is None or entry.handle.state is RepState.ENDED:
        sock = make_socket()
        waiting.push(flow_id, sock, now)
        return MatchResult(MatchKind.NEW, sock)
    if entry.handle.state is RepState.ONE_CONN:
        return MatchResult(MatchKind.MATCHED, entry.handle)
    return MatchResult(MatchKind.RESET_LATE, entry.handle)


class ServerEngine:
    """Funnels raw accepted legs from either backend into replicated sockets.

    The adapter calls :meth:`accept_leg` for every completed handshake on
    either listening port and :meth:`tick` periodically (or at deadlines).
    ``on_connection`` fires exactly once per logical flow, at the first SYN.
    """

    def __init__(self, config: RepConfig,
                 on_connection: Callable[[RepSocket], None],
                 wl_timeout=None) -> None:
        self.config = config
        self.on_connection = on_connection
        self.waiting = WaitingList(config.wl_timeout if wl_timeout is None else wl_timeout)
        self._active: dict[FlowId, RepSocket] = {}

    def accept_leg(self, flow_id: FlowId, leg, now) -> Optional[RepSocket]:
        active = self._active.get(flow_id)
        if active is not None and flow_id not in self.waiting:
            if active.state is RepState.DUP_CONN:
                # Duplicate SYN for a flow already matched: reject the extra leg.
                leg.reset()
                return None
            # ENDED, or CHOSEN after timeout: the port pair is being reused;
            # serve it as a fresh plain connection.
            del self._active[flow_id]

        def make() -> RepSocket:
            return RepSocket.server(flow_id, self.config, leg)

        result = server_on_syn(self.waiting, flow_id, now, make)
        if result.kind is MatchKind.NEW:
            self._active[flow_id] = result.socket
            self.on_connection(result.socket)
            return result.socket
        if result.kind is MatchKind.MATCHED:
            result.socket.attach_second_leg(leg)
            return result.socket
        leg.reset()  # accepted, then abortively closed
        return None

    def tick(self, now) -> list[FlowId]:
        expired = self.waiting.tick(now)
        if self._active:
            dead = [fid for fid, s in self._active.items() if s.state is RepState.ENDED]
            for fid in dead:
                del self._active[fid]
        return expired
