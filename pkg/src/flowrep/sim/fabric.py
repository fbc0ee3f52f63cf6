"""Packet fabric: links with drop-tail queues and a simplified TCP endpoint.

Both are written for event-loop throughput: one calendar event per link hop,
lazy retransmission timers, and count-only payload for bulk traffic (real
bytes are carried only when an application supplies them).

The TCP model: three-way handshake, slow start from an initial window of 3
packets, additive increase past ssthresh, per-packet cumulative ACKs,
timeout-only loss recovery with exponential backoff, a retransmission timer
floored at rto_min, and FIN/RST teardown.  No SACK or fast retransmit; the
queueing and timeout behavior is what the experiments depend on.
"""

from __future__ import annotations

from collections import deque
from heapq import heappush

MTU_B = 1500
HEADER_B = 40
MSS_B = MTU_B - HEADER_B
CTRL_B = 40                    # SYN / SYNACK / ACK / FIN / RST wire size
HOST_NS = 5_000                # per-packet host stack delay, each end

INITIAL_CWND = 3.0
# Slow start hands over to additive increase here unless a loss resets it
# first; a few times the path BDP, mirroring delay-based slow-start exit in
# production stacks, so one sender does not blast a whole switch buffer.
INITIAL_SSTHRESH_PKTS = 64
INITIAL_RTO_NS = 3_000_000_000   # 3 s before any RTT sample
RTO_MIN_NS = 10_000_000          # 10 ms
RTO_MAX_NS = 16_000_000_000

SYN, SYNACK, ACK, DATA, FIN, RST = range(6)

_ZEROS = bytes(MSS_B)


class Packet:
    __slots__ = ("route", "hop", "last", "ep", "kind", "seq", "paylen",
                 "size", "meta")

    def __init__(self, route, ep, kind, seq=0, paylen=0, meta=None):
        self.route = route
        self.hop = 0
        self.last = len(route) - 1
        self.ep = ep
        self.kind = kind
        self.seq = seq
        self.paylen = paylen
        self.size = paylen + HEADER_B if kind == DATA else CTRL_B
        self.meta = meta


class Link:
    """One direction of a cable: fixed-rate server with a drop-tail queue.

    The queue is virtual: an arriving packet is assigned its service finish
    time immediately, so a packet costs one calendar event per hop.  Capacity
    counts packets not yet fully serialized (in service + waiting).
    """

    __slots__ = ("cal", "name", "cap", "prop_ns", "_byte_ns", "_q",
                 "busy_until", "drops", "_last_prop_ns")

    def __init__(self, cal, name, rate_bps, prop_ns, queue_pkts):
        self.cal = cal
        self.name = name
        self.cap = queue_pkts
        self.prop_ns = prop_ns
        self._byte_ns = 8e9 / rate_bps
        self._q = deque()
        self.busy_until = 0
        self.drops = 0
        self._last_prop_ns = prop_ns + HOST_NS  # final hop adds receiver stack delay

    def submit(self, pkt, now):
        q = self._q
        while q and q[0] <= now:
            q.popleft()
        if len(q) >= self.cap:
            self.drops += 1
            return
        start = self.busy_until
        if start < now:
            start = now
        fin = start + int(pkt.size * self._byte_ns)
        self.busy_until = fin
        q.append(fin)
        # scheduling inlined: this is the hottest call site in a run
        cal = self.cal
        cal._seq = s = cal._seq + 1
        if pkt.hop == pkt.last:
            heappush(cal._heap, (fin + self._last_prop_ns, s, pkt.ep.receive, pkt))
        else:
            heappush(cal._heap, (fin + self.prop_ns, s, self._forward, pkt))

    def _forward(self, pkt):
        pkt.hop = h = pkt.hop + 1
        pkt.route[h].submit(pkt, self.cal.now)

    def queued(self, now) -> int:
        q = self._q
        while q and q[0] <= now:
            q.popleft()
        return len(q)


class Endpoint:
    """One side of one simulated TCP connection."""

    __slots__ = (
        "cal", "host", "peer_host", "sport", "dport", "route", "peer", "sink",
        "dispatch", "is_client", "state", "closed", "abortive",
        "out_data", "out_len", "app_ended", "snd_next", "snd_una", "fin_sent",
        "cwnd", "ssthresh", "srtt", "rttvar", "rto",
        "_deadline", "_evt_at", "_tgen", "_last_rtx",
        "rcv_next", "_ooo", "_fin_seq", "fin_consumed",
        "syn_sent_at", "established_at", "completed", "on_payload_acked",
        "payload_wire", "payload_recv", "rtx_count", "rto_min", "rto_max",
    )

    # states
    _CLOSED, _SYN_SENT, _SYN_RCVD, _ESTAB = range(4)

    def __init__(self, cal, host, peer_host, sport, dport, route, sink,
                 is_client, rto_min=RTO_MIN_NS, initial_rto=INITIAL_RTO_NS,
                 ssthresh_pkts=INITIAL_SSTHRESH_PKTS):
        self.cal = cal
        self.host = host
        self.peer_host = peer_host
        self.sport = sport
        self.dport = dport
        self.route = route
        self.peer = None
        self.sink = sink
        self.dispatch = None   # destination Host, for packets sent pre-peer
        self.is_client = is_client
        self.state = self._CLOSED
        self.closed = False
        self.abortive = False
        self.out_data = None
        self.out_len = 0
        self.app_ended = False
        self.snd_next = 0
        self.snd_una = 0
        self.fin_sent = False
        self.cwnd = INITIAL_CWND
        self.ssthresh = float(ssthresh_pkts)
        self.srtt = None
        self.rttvar = 0
        self.rto = initial_rto
        self.rto_min = rto_min
        self.rto_max = RTO_MAX_NS
        self._deadline = None
        self._evt_at = None
        self._tgen = 0
        self._last_rtx = -1
        self.rcv_next = 0
        self._ooo = None
        self._fin_seq = None
        self.fin_consumed = False
        self.syn_sent_at = None
        self.established_at = None
        self.completed = False
        self.on_payload_acked = None
        self.payload_wire = 0
        self.payload_recv = 0
        self.rtx_count = 0

    # -- sending ------------------------------------------------------------------

    def start(self, _arg=None) -> None:
        """Client only: launch the handshake now (calendar-schedulable)."""
        self.state = self._SYN_SENT
        self.syn_sent_at = self.cal.now
        self._emit(Packet(self.route, self.dispatch, SYN, meta=self))
        self._arm(self.cal.now + self.rto)

    def write(self, data) -> None:
        if self.app_ended:
            raise RuntimeError("write after end")
        if self.out_data is None:
            self.out_data = bytearray()
        self.out_data.extend(data)
        self.out_len = len(self.out_data)
        self._pump()

    def write_count(self, n: int) -> None:
        """Queue n opaque payload bytes (no content carried)."""
        if self.app_ended:
            raise RuntimeError("write after end")
        self.out_len += n
        self._pump()

    def end(self) -> None:
        if self.app_ended or self.closed:
            return
        self.app_ended = True
        self._pump()

    def reset(self) -> None:
        """Abortive close: RST to the peer, drop all local state."""
        if self.closed:
            return
        self.closed = True
        self.abortive = True
        self._deadline = None
        if self.state != self._CLOSED:
            target = self.peer if self.peer is not None else self.dispatch
            self._emit(Packet(self.route, target, RST, meta=self))

    def _emit(self, pkt) -> None:
        pkt.route[0].submit(pkt, self.cal.now + HOST_NS)

    def _pump(self) -> None:
        if self.state != self._ESTAB or self.closed:
            return
        una = self.snd_una
        window = int(self.cwnd) * MSS_B
        nxt = self.snd_next
        out = self.out_len
        while nxt < out and nxt - una < window:
            n = out - nxt
            if n > MSS_B:
                n = MSS_B
            self._emit(Packet(self.route, self.peer, DATA, nxt, n,
                              meta=self.cal.now))
            self.payload_wire += n
            nxt += n
        if nxt != self.snd_next:
            self.snd_next = nxt
            if self._deadline is None:
                self._arm(self.cal.now + self.rto)
        if (self.app_ended and not self.fin_sent and self.snd_next >= self.out_len):
            self.fin_sent = True
            self._emit(Packet(self.route, self.peer, FIN, self.out_len,
                              meta=self.cal.now))
            if self._deadline is None:
                self._arm(self.cal.now + self.rto)

    # -- receiving -----------------------------------------------------------------

    def receive(self, pkt) -> None:
        if self.closed:
            if pkt.kind == RST:
                return
            if self.abortive:
                if self.peer is not None:
                    self._emit(Packet(self.route, self.peer, RST))
            elif pkt.kind == DATA or pkt.kind == FIN:
                # The peer lost our final ACK: repeat it so it can close too.
                self._send_ack(pkt.meta)
            return
        kind = pkt.kind
        if kind == DATA:
            self._on_data(pkt)
        elif kind == ACK:
            self._on_ack(pkt.seq, pkt.meta)
        elif kind == SYNACK:
            self._on_synack()
        elif kind == FIN:
            self._on_fin(pkt)
        elif kind == RST:
            self._on_rst()

    def _on_synack(self) -> None:
        if self.state != self._SYN_SENT:
            return
        self.state = self._ESTAB
        self.established_at = self.cal.now
        self._deadline = None
        if self.rtx_count == 0:
            self._sample_rtt(self.cal.now - self.syn_sent_at)
        self.sink.established(self)   # app writes typically happen in here
        self._pump()
        if self.snd_next == 0 and not self.fin_sent and not self.closed:
            # nothing to piggyback on: complete the handshake explicitly
            self._emit(Packet(self.route, self.peer, ACK, self.rcv_next))

    def send_synack(self) -> None:
        self.state = self._SYN_RCVD
        self._emit(Packet(self.route, self.peer, SYNACK))
        self.syn_sent_at = self.cal.now
        self._arm(self.cal.now + self.rto)

    def _maybe_establish_server(self) -> None:
        if self.state == self._SYN_RCVD:
            self.state = self._ESTAB
            self.established_at = self.cal.now
            self._deadline = None
            self.sink.established(self)
            self._pump()

    def _on_data(self, pkt) -> None:
        self._maybe_establish_server()
        seq, n = pkt.seq, pkt.paylen
        if seq == self.rcv_next:
            self.rcv_next = end = seq + n
            self.payload_recv += n
            self.sink.data(self, seq, n)
            ooo = self._ooo
            if ooo:
                while end in ooo:
                    m = ooo.pop(end)
                    self.payload_recv += m
                    self.sink.data(self, end, m)
                    end += m
                self.rcv_next = end
            if self._fin_seq is not None and self.rcv_next == self._fin_seq:
                self._consume_fin()
        elif seq > self.rcv_next:
            if self._ooo is None:
                self._ooo = {}
            self._ooo[seq] = n
        self._send_ack(pkt.meta)

    def _on_fin(self, pkt) -> None:
        self._maybe_establish_server()
        if not self.fin_consumed:
            if pkt.seq == self.rcv_next:
                self._consume_fin()
            else:
                self._fin_seq = pkt.seq
        self._send_ack(pkt.meta)

    def _consume_fin(self) -> None:
        self.fin_consumed = True
        self._fin_seq = None
        self.sink.eof(self)
        self._maybe_close()

    def _send_ack(self, echo) -> None:
        ackno = self.rcv_next + (1 if self.fin_consumed else 0)
        self._emit(Packet(self.route, self.peer, ACK, ackno, meta=echo))

    def _on_ack(self, ackno, echo) -> None:
        self._maybe_establish_server()
        if ackno <= self.snd_una:
            return  # duplicate: timeout-only recovery
        self.snd_una = ackno
        if self.snd_next < ackno:
            self.snd_next = ackno  # receiver buffered past our rewind point
        if echo is not None:
            m = self.cal.now - echo
            if m > 0:
                self._sample_rtt(m)
        if self.cwnd < self.ssthresh:
            self.cwnd += 1.0
        else:
            self.cwnd += 1.0 / self.cwnd
        outstanding = self.snd_next > ackno or (self.fin_sent and ackno <= self.out_len)
        if outstanding:
            self._arm(self.cal.now + self.rto)
        else:
            self._deadline = None
        if (not self.completed and self.app_ended and ackno >= self.out_len):
            self.completed = True
            if self.on_payload_acked is not None:
                self.on_payload_acked(self)
        self._pump()
        if self.fin_sent and self.snd_una > self.out_len:
            self._maybe_close()

    def _on_rst(self) -> None:
        self.closed = True
        self._deadline = None
        self.sink.error(self)

    def _maybe_close(self) -> None:
        if (not self.closed and self.fin_consumed and self.fin_sent
                and self.snd_una > self.out_len):
            self.closed = True
            self._deadline = None
            self.sink.closed(self)

    # -- RTT / timers ----------------------------------------------------------------

    def _sample_rtt(self, m: int) -> None:
        if self.srtt is None:
            self.srtt = m
            self.rttvar = m >> 1
        else:
            d = m - self.srtt
            if d < 0:
                d = -d
            self.rttvar += (d - self.rttvar) >> 2
            self.srtt += (m - self.srtt) >> 3
        rto = self.srtt + 4 * self.rttvar
        if rto < self.rto_min:
            rto = self.rto_min
        elif rto > self.rto_max:
            rto = self.rto_max
        self.rto = rto

    def _arm(self, deadline: int) -> None:
        self._deadline = deadline
        if self._evt_at is None or self._evt_at > deadline:
            self._tgen += 1
            self._evt_at = deadline
            self.cal.schedule(deadline, self._timer_fire, self._tgen)

    def _timer_fire(self, gen) -> None:
        if gen != self._tgen:
            return  # superseded
        self._evt_at = None
        d = self._deadline
        if d is None or self.closed:
            return
        if self.cal.now < d:
            self._arm(d)
            return
        self._on_timeout()

    def _on_timeout(self) -> None:
        self.rtx_count += 1
        self._last_rtx = self.cal.now
        if self.state == self._SYN_SENT:
            self._emit(Packet(self.route, self.dispatch, SYN, meta=self))
        elif self.state == self._SYN_RCVD:
            self._emit(Packet(self.route, self.peer, SYNACK))
        elif self.snd_una < self.out_len:
            # Go back N: rewind and slow-start the whole tail again; the
            # receiver's out-of-order buffer lets the cumulative ACK jump.
            inflight = (self.snd_next - self.snd_una + MSS_B - 1) // MSS_B
            self.ssthresh = max(inflight >> 1, 2)
            self.cwnd = 1.0
            self.snd_next = self.snd_una
            if self.fin_sent:
                self.fin_sent = False
            self._pump()
        elif self.fin_sent and self.snd_una <= self.out_len:
            self._emit(Packet(self.route, self.peer, FIN, self.out_len,
                              meta=self.cal.now))
        else:
            self._deadline = None
            return
        self.rto = min(self.rto * 2, self.rto_max)
        self._arm(self.cal.now + self.rto)

    def data_slice(self, start: int, n: int) -> bytes:
        """Content of [start, start+n) as sent by the peer (zeros if opaque)."""
        src = self.peer.out_data if self.peer is not None else None
        if src is None:
            return _ZEROS[:n] if n <= MSS_B else bytes(n)
        return bytes(src[start:start + n])

    def __repr__(self) -> str:
        return (f"Endpoint({self.host}:{self.sport}->{self.peer_host}:{self.dport} "
                f"st={self.state} una={self.snd_una}/{self.out_len})")


class Host:
    """Per-host packet dispatcher: terminates SYNs, owns the listener table."""

    __slots__ = ("name", "net", "listeners")

    def __init__(self, name, net):
        self.name = name
        self.net = net
        self.listeners = {}

    def receive(self, pkt) -> None:
        # Only handshake-opening packets target the host itself.
        client_ep = pkt.meta
        if pkt.kind == SYN:
            if client_ep.peer is not None:
                server_ep = client_ep.peer
                if server_ep.closed:
                    self._refuse(client_ep)
                else:
                    server_ep._emit(Packet(server_ep.route, client_ep, SYNACK))
                return
            if client_ep.closed:
                self._refuse(client_ep)
                return
            listener = self.listeners.get(client_ep.dport)
            if listener is None:
                self._refuse(client_ep)
                return
            server_ep = self.net._make_server_endpoint(self, client_ep)
            listener(server_ep)
            server_ep.send_synack()
        elif pkt.kind == RST and client_ep is not None and client_ep.peer is not None:
            client_ep.peer.receive(pkt)

    def _refuse(self, client_ep) -> None:
        reply = Packet(self.net.route_links(
            self.name, client_ep.host, client_ep.dport, client_ep.sport),
            client_ep, RST)
        reply.route[0].submit(reply, self.net.cal.now + HOST_NS)
