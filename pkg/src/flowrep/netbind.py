"""Real OS TCP binding for the replication engine (asyncio reactor).

The client opens both legs from one local source port (SO_REUSEADDR +
SO_REUSEPORT before bind) so the server can pair them by (client address,
client source port) alone, exactly as over the simulator.  Should a platform
refuse the shared bind, an optional fallback prefixes each leg with an
8-byte cleartext flow token ("RPN1" magic + 4 random bytes) and matches on
that instead; it is off by default and never used when the bind succeeds.

Everything here is single-threaded on the event loop; callbacks for one
socket are never re-entered.
"""

from __future__ import annotations

import asyncio
import os
import socket
import statistics
import struct
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .core import FlowId, RepConfig, RepSocket, Scheme, ServerEngine

LOCALHOST = "127.0.0.1"
FLOW_TOKEN_MAGIC = 0x52504E31  # "RPN1"
_TOKEN_LEN = 8


_UNSET = object()


class _LegProtocol(asyncio.Protocol):
    """One TCP connection wired to one RepSocket leg."""

    def __init__(self, nodelay: bool = True):
        self.transport: Optional[asyncio.Transport] = None
        self.sock: Optional[RepSocket] = None
        self.leg_id = 0
        self.nodelay = nodelay
        self._pre: list[bytes] = []    # events before the leg is bound
        self._pre_eof = False
        self._pre_lost = _UNSET
        self._sent_eof = False
        self._peer_eof = False
        self.peer = None

    def bind_leg(self, sock: RepSocket, leg_id: int) -> None:
        self.sock = sock
        self.leg_id = leg_id
        for chunk in self._pre:
            sock.on_leg_data(leg_id, chunk)
        self._pre.clear()
        if self._pre_eof:
            sock.on_leg_end(leg_id)
        if self._pre_lost is None:
            sock.on_leg_closed(leg_id)
        elif self._pre_lost is not _UNSET:
            sock.on_leg_error(leg_id, self._pre_lost)

    # -- asyncio.Protocol -------------------------------------------------------

    def connection_made(self, transport) -> None:
        self.transport = transport
        self.peer = transport.get_extra_info("peername")
        raw = transport.get_extra_info("socket")
        if raw is not None and self.nodelay:
            raw.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def data_received(self, data: bytes) -> None:
        if self.sock is None:
            self._pre.append(data)
        else:
            self.sock.on_leg_data(self.leg_id, data)

    def eof_received(self) -> bool:
        self._peer_eof = True
        if self.sock is None:
            self._pre_eof = True
        else:
            self.sock.on_leg_end(self.leg_id)
        if self._sent_eof and self.transport is not None:
            self.transport.close()  # both directions done
        return True  # keep the write side open (half-close)

    def connection_lost(self, exc) -> None:
        if self.sock is None:
            self._pre_lost = exc
        elif exc is None:
            self.sock.on_leg_closed(self.leg_id)
        else:
            self.sock.on_leg_error(self.leg_id, exc)

    # -- leg handle interface ------------------------------------------------------

    def write(self, data) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.write(bytes(data))

    def end(self) -> None:
        t = self.transport
        if t is None or t.is_closing() or self._sent_eof:
            return
        self._sent_eof = True
        if self._peer_eof:
            t.close()  # flushes buffered writes, then FIN
            return
        try:
            t.write_eof()
        except (OSError, RuntimeError, NotImplementedError):
            t.close()

    def reset(self) -> None:
        t = self.transport
        if t is None:
            return
        raw = t.get_extra_info("socket")
        if raw is not None:
            try:
                # abortive close must emit RST, not FIN
                raw.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER,
                               struct.pack("ii", 1, 0))
            except OSError:
                pass
        t.abort()


@dataclass
class ListenerPair:
    """Two listening endpoints on base_port and base_port + 1."""

    base_port: int
    engine: ServerEngine
    servers: list
    _tick_task: asyncio.Task

    async def close(self) -> None:
        self._tick_task.cancel()
        for srv in self.servers:
            srv.close()
        for srv in self.servers:
            await srv.wait_closed()


async def serve(base_port: int, config: RepConfig,
                on_connection: Callable[[RepSocket], None],
                host: str = LOCALHOST) -> ListenerPair:
    """Listen on (base_port, base_port+1); atomic: both bind or neither.

    Incoming handshakes on either port are funneled through the waiting
    list; ``on_connection`` fires once per logical flow, at its first SYN.
    """
    loop = asyncio.get_running_loop()
    engine = ServerEngine(config, on_connection)

    def factory() -> _LegProtocol:
        return _ServerLegProtocol(engine, loop, config.nodelay,
                                  token_mode=config.flow_token_fallback)

    servers = []
    for port in (base_port, base_port + 1):
        try:
            srv = await loop.create_server(factory, host, port, backlog=1024)
        except OSError as exc:
            for s in servers:
                s.close()
                await s.wait_closed()
            raise OSError(f"port {port} already in use") from exc
        servers.append(srv)

    async def ticker() -> None:
        interval = max(config.wl_timeout / 4, 0.01)
        while True:
            await asyncio.sleep(interval)
            engine.tick(loop.time())

    task = loop.create_task(ticker())
    return ListenerPair(base_port, engine, servers, task)


class _ServerLegProtocol(_LegProtocol):
    def __init__(self, engine: ServerEngine, loop, nodelay: bool,
                 token_mode: bool = False):
        super().__init__(nodelay)
        self.engine = engine
        self.loop = loop
        self.token_mode = token_mode
        self._token_buf: Optional[bytearray] = bytearray() if token_mode else None

    def connection_made(self, transport) -> None:
        super().connection_made(transport)
        if not self.token_mode:
            self._accept(FlowId(self.peer[0], self.peer[1]))

    def _accept(self, flow_id: FlowId) -> None:
        sock = self.engine.accept_leg(flow_id, self, self.loop.time())
        if sock is None:
            return  # duplicate or late leg: engine already reset it
        for i, leg in enumerate(sock.legs):
            if leg is not None and leg.handle is self:
                self.bind_leg(sock, i)
                break

    def data_received(self, data: bytes) -> None:
        if self._token_buf is None:
            super().data_received(data)
            return
        # Fallback framing: legs open from distinct source ports and announce
        # their flow with an 8-byte cleartext preamble instead.
        buf = self._token_buf
        buf.extend(data)
        magic = struct.pack(">I", FLOW_TOKEN_MAGIC)
        if bytes(buf[:4]) != magic[:min(4, len(buf))]:
            self._token_buf = None
            self._accept(FlowId(self.peer[0], self.peer[1]))
            super().data_received(bytes(buf))
            return
        if len(buf) < _TOKEN_LEN:
            return
        token = int.from_bytes(buf[4:8], "big")
        rest = bytes(buf[8:])
        self._token_buf = None
        self._accept(FlowId("token", token))
        if rest:
            super().data_received(rest)


def _bound_client_socket(port: int) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    if hasattr(socket, "SO_REUSEPORT"):
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    s.bind((LOCALHOST, port))
    s.setblocking(False)
    return s


def _alloc_leg_sockets(n: int, attempts: int = 64) -> tuple[int, list[socket.socket]]:
    """n sockets sharing one ephemeral local port (same-source-port binding)."""
    for _ in range(attempts):
        first = _bound_client_socket(0)
        port = first.getsockname()[1]
        socks = [first]
        try:
            for _ in range(n - 1):
                socks.append(_bound_client_socket(port))
            return port, socks
        except OSError:
            for s in socks:
                s.close()
    raise OSError("could not bind legs to a shared source port")


def connect_nowait(address: str, base_port: int, config: RepConfig,
                   mode: Scheme = Scheme.REPFLOW) -> RepSocket:
    """Initiate a replicated connection; returns the socket immediately.

    REPFLOW launches both legs concurrently: the socket is usable at the
    first established leg and upgrades when the second lands.  REPSYN keeps
    whichever handshake finishes first and abortively resets the other.
    PLAIN opens a single ordinary connection to base_port.
    """
    loop = asyncio.get_running_loop()
    n_legs = 1 if mode is Scheme.PLAIN else 2
    if config.flow_token_fallback:
        # distinct source ports; legs identify themselves with a preamble
        token = int.from_bytes(os.urandom(4), "big")
        raws = []
        for _ in range(n_legs):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setblocking(False)
            raws.append(s)
        flow_id = FlowId("token", token)
        preamble = struct.pack(">II", FLOW_TOKEN_MAGIC, token)
    else:
        local_port, raws = _alloc_leg_sockets(n_legs)
        flow_id = FlowId(LOCALHOST, local_port)
        preamble = None
    sock = RepSocket.client(flow_id, mode, config)
    for i, raw in enumerate(raws):
        proto = _LegProtocol(config.nodelay)
        proto.bind_leg(sock, i)
        sock.attach_leg(i, proto)
        loop.create_task(_connect_leg(loop, sock, proto, raw, i,
                                      address, base_port + i, preamble))
    return sock


async def _connect_leg(loop, sock: RepSocket, proto: _LegProtocol,
                       raw: socket.socket, leg_id: int,
                       address: str, port: int,
                       preamble: Optional[bytes] = None) -> None:
    try:
        await loop.sock_connect(raw, (address, port))
        await loop.create_connection(lambda: proto, sock=raw)
    except (OSError, asyncio.CancelledError) as exc:
        raw.close()
        sock.on_leg_error(leg_id, exc)
        return
    if preamble is not None and proto.transport is not None:
        proto.transport.write(preamble)
    sock.on_leg_connected(leg_id)


async def connect(address: str, base_port: int, config: RepConfig,
                  mode: Scheme = Scheme.REPFLOW,
                  timeout: float = 10.0) -> RepSocket:
    """connect_nowait, awaited until the socket is usable for writes."""
    sock = connect_nowait(address, base_port, config, mode)
    ready = asyncio.get_running_loop().create_future()

    def ok() -> None:
        if not ready.done():
            ready.set_result(None)

    def fail(exc) -> None:
        if not ready.done():
            ready.set_exception(ConnectionError(f"both legs failed: {exc}"))

    sock.on_connected = ok
    sock.on_error = fail
    await asyncio.wait_for(ready, timeout)
    sock.on_connected = None
    sock.on_error = None
    return sock


# -- echo + benchmark -----------------------------------------------------------------


def echo_handler(sock: RepSocket) -> None:
    """Server application: echo every byte back, end when the peer ends."""
    sock.on_data = sock.write
    sock.on_end = sock.end


async def echo_roundtrip(address: str, base_port: int, config: RepConfig,
                         mode: Scheme, payload: bytes,
                         timeout: float = 30.0) -> bytes:
    """Send ``payload`` and collect the echoed bytes until the stream ends."""
    sock = await connect(address, base_port, config, mode)
    loop = asyncio.get_running_loop()
    done = loop.create_future()
    got = bytearray()

    def on_data(chunk: bytes) -> None:
        got.extend(chunk)

    def on_end() -> None:
        if not done.done():
            done.set_result(None)

    def on_error(exc) -> None:
        if not done.done():
            if len(got) >= len(payload):
                done.set_result(None)
            else:
                done.set_exception(exc)

    sock.on_data = on_data
    sock.on_end = on_end
    sock.on_error = on_error
    sock.write(payload)
    sock.end()
    await asyncio.wait_for(done, timeout)
    sock.reset()
    return bytes(got)


@dataclass
class OverheadStats:
    mode: str
    n: int
    size_bytes: int
    mean_us: float
    std_us: float
    fcts_us: list[float]

    def csv_rows(self) -> list[str]:
        return [f"{i},{self.mode},{self.size_bytes},{fct:.1f}"
                for i, fct in enumerate(self.fcts_us)]


async def _one_bench_flow(address: str, base_port: int, config: RepConfig,
                          mode: Scheme, payload: bytes) -> float:
    """One localhost flow: connect, send framed payload, wait for the ack."""
    loop = asyncio.get_running_loop()
    t0 = time.perf_counter()
    sock = await connect(address, base_port, config, mode)
    done = loop.create_future()

    def on_data(_chunk: bytes) -> None:
        if not done.done():
            done.set_result(None)

    sock.on_data = on_data
    sock.on_error = lambda exc: done.done() or done.set_exception(exc)
    sock.write(struct.pack(">I", len(payload)) + payload)
    await asyncio.wait_for(done, 30.0)
    fct = (time.perf_counter() - t0) * 1e6
    sock.reset()
    return fct


def bench_server_handler(sock: RepSocket) -> None:
    """Reads one length-prefixed flow, answers with a 1-byte ack."""
    buf = bytearray()
    acked = False

    def on_data(chunk: bytes) -> None:
        nonlocal acked
        if acked:
            return
        buf.extend(chunk)
        if len(buf) >= 4:
            need = struct.unpack_from(">I", buf)[0]
            if len(buf) >= 4 + need:
                acked = True
                sock.write(b"\x01")

    sock.on_data = on_data
    sock.on_end = sock.end


async def loopback_overhead_bench(n_flows: int, flow_size: int, mode: Scheme,
                                  base_port: int = 9300,
                                  config: Optional[RepConfig] = None) -> OverheadStats:
    """Mean/std FCT of ``n_flows`` sequential localhost flows of ``flow_size``.

    This is the kernel-overhead baseline used to normalize real-socket FCTs;
    replication's extra connections show up here as added overhead.
    """
    config = config or RepConfig(wl_timeout=3.0, base_port=base_port)
    pair = await serve(base_port, config, bench_server_handler)
    payload = bytes(flow_size)
    fcts = []
    try:
        for _ in range(n_flows):
            fcts.append(await _one_bench_flow(LOCALHOST, base_port, config,
                                              mode, payload))
    finally:
        await pair.close()
    mean = statistics.fmean(fcts)
    std = statistics.pstdev(fcts)
    return OverheadStats(str(mode), n_flows, flow_size, mean, std, fcts)
