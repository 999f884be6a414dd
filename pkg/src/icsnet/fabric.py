"""Deterministic discrete-event network fabric.

All component traffic rides this in-process fabric: a single virtual clock,
one event queue ordered by (timestamp, sequence), per-link taps for capture
and link interposition for man-in-the-middle. Identical (topology, seed,
scheduled inputs) reproduce byte-identical tap sequences; simultaneous
events are totally ordered by their schedule sequence, so frames at equal
timestamps process in frame-id order.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from collections import deque
from dataclasses import dataclass, replace

from .errors import (
    AlreadyInterposed,
    ConfigError,
    FlowClosed,
    NotOnSegment,
    TimeReversal,
    Unreachable,
)

log = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000

DELIVERED = "delivered"
LOST = "lost"
QUEUE_DROPPED = "queue_dropped"
INTERCEPTED = "intercepted"

REQUEST = "request"
RESPONSE = "response"

DEFAULT_INTERPOSER_LATENCY_NS = 200_000


def substream(seed: int, *labels) -> random.Random:
    """Independent RNG stream derived from the global seed and a label path.

    Each consumer (per-link loss, planner tie-breaks, schedule jitter, noise
    payloads) draws from its own stream so one consumer's draw count never
    shifts another's.
    """
    material = ":".join([str(seed), *map(str, labels)]).encode()
    digest = hashlib.sha256(material).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class Link:
    id: str
    a: str
    b: str
    latency_ns: int = 500_000
    loss_prob: float = 0.0
    segment: str = ""

    def other(self, node: str) -> str:
        return self.b if node == self.a else self.a


@dataclass(frozen=True)
class ServiceQueue:
    """Finite request queue in front of a server port.

    capacity bounds waiting + in-service requests; service_rate is fixed.
    Arrivals beyond capacity are dropped at the door, which is what makes a
    request flood observable as benign-traffic loss.
    """
    capacity: int = 16
    service_rate: float = 100.0
    busy_reply: bool = False

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("service queue capacity must be >= 1")
        if self.service_rate <= 0:
            raise ConfigError("service rate must be > 0")


@dataclass(frozen=True)
class Frame:
    frame_id: int
    ts_ns: int
    flow_id: int
    payload: bytes
    origin: str


@dataclass(frozen=True)
class TapEvent:
    ts_ns: int
    link: str
    frame: Frame
    disposition: str
    direction: str


@dataclass
class Flow:
    flow_id: int
    src: str
    src_port: int
    dst: str
    dst_port: int
    ordinal: int
    link: Link
    on_response: object = None
    open: bool = True

    @property
    def key(self):
        return (self.src, self.src_port, self.dst, self.dst_port)


class Tap:
    """Passive per-link observer; never perturbs delivery timing."""

    def __init__(self, link_id: str):
        self.link_id = link_id
        self.events: list[TapEvent] = []

    def __iter__(self):
        return iter(self.events)


class InterposerHandle:
    """Attacker's grip on one link.

    While active, every frame on the link is first delivered to `callback`,
    which returns one of ("forward", None), ("modify", new_payload) or
    ("drop", None). Extra frames go out through inject().
    """

    def __init__(self, fabric, link: Link, attacker: str, callback,
                 latency_ns: int = DEFAULT_INTERPOSER_LATENCY_NS):
        self._fabric = fabric
        self.link = link
        self.attacker = attacker
        self.callback = callback
        self.latency_ns = latency_ns
        self.active = True

    def inject(self, flow_id: int, payload: bytes, origin: str,
               direction: str = REQUEST) -> int:
        """Inject a new frame from the interposer toward one endpoint of the
        link, as if it had just cleared the attacker."""
        if not self.active:
            raise FlowClosed("interposer already removed")
        return self._fabric._inject_from_interposer(self, flow_id, payload, origin, direction)

    def remove(self):
        self.active = False
        self._fabric._interposers.pop(self.link.id, None)


class _ServiceRuntime:
    def __init__(self, spec: ServiceQueue, handler, on_queue_drop=None):
        self.spec = spec
        self.handler = handler
        self.on_queue_drop = on_queue_drop
        self.pending = deque()
        self.in_service = False
        self.service_time_ns = round(NS_PER_S / spec.service_rate)

    @property
    def depth(self) -> int:
        return len(self.pending) + (1 if self.in_service else 0)


class _Node:
    def __init__(self, node_id: str, address: str):
        self.id = node_id
        self.address = address
        self.services: dict[int, _ServiceRuntime] = {}
        self.frames_in = 0
        self.frames_out = 0


class TimerHandle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class Fabric:
    """Single-owner event loop; component behaviors are callbacks it schedules.

    Not safe for concurrent mutation: external inputs enter only through
    post_command(), drained between events.
    """

    def __init__(self, nodes: dict[str, str], links, seed: int):
        self.clock = 0
        self.seed = seed
        self._events = []
        self._seq = 0
        self._frame_seq = 0
        self._flow_seq = 0
        self._commands = deque()
        self._nodes: dict[str, _Node] = {}
        self._links: dict[str, Link] = {}
        self._adjacent: dict[tuple, list[Link]] = {}
        self._flows: dict[int, Flow] = {}
        self._flow_ordinals: dict[tuple, int] = {}
        self._ephemeral: dict[str, int] = {}
        self._taps: dict[str, Tap] = {}
        self._interposers: dict[str, InterposerHandle] = {}
        self._link_rng: dict[str, random.Random] = {}
        self.counters = {
            "sent": 0, "delivered": 0, "lost": 0,
            "queue_dropped": 0, "intercepted_dropped": 0,
        }

        seen_addr = {}
        for node_id, address in nodes.items():
            if address in seen_addr:
                raise ConfigError(
                    f"nodes {seen_addr[address]!r} and {node_id!r} share address {address}")
            seen_addr[address] = node_id
            self._nodes[node_id] = _Node(node_id, address)

        for link in links:
            link = Link(link.id, link.a, link.b, link.latency_ns, link.loss_prob, link.segment)
            if link.a == link.b:
                raise ConfigError(f"link {link.id} endpoints are not distinct")
            for end in (link.a, link.b):
                if end not in self._nodes:
                    raise ConfigError(f"link {link.id} endpoint {end!r} not in topology")
            if link.latency_ns < 0:
                raise ConfigError(f"link {link.id} latency negative")
            if not 0.0 <= link.loss_prob <= 1.0:
                raise ConfigError(f"link {link.id} loss probability outside [0,1]")
            if link.id in self._links:
                raise ConfigError(f"duplicate link id {link.id}")
            self._links[link.id] = link
            self._adjacent.setdefault(self._pair(link.a, link.b), []).append(link)
            # Per-link loss stream keyed by (seed, link id): links never
            # perturb each other's draw counts.
            self._link_rng[link.id] = substream(seed, "loss", link.id)

    # ------------------------------------------------------------------
    # topology queries
    # ------------------------------------------------------------------

    @staticmethod
    def _pair(a: str, b: str) -> tuple:
        return (a, b) if a <= b else (b, a)

    @property
    def links(self):
        return list(self._links.values())

    def link(self, link_id: str) -> Link:
        return self._links[link_id]

    def address_of(self, node_id: str) -> str:
        return self._nodes[node_id].address

    def node_ids(self):
        return list(self._nodes)

    def attached_segments(self, node_id: str) -> set:
        return {l.segment for l in self._links.values() if node_id in (l.a, l.b)}

    def direct_link(self, a: str, b: str):
        links = self._adjacent.get(self._pair(a, b))
        return links[0] if links else None

    # ------------------------------------------------------------------
    # servers, flows, frames
    # ------------------------------------------------------------------

    def set_server(self, node_id: str, port: int, handler,
                   queue: ServiceQueue | None = None, on_queue_drop=None):
        """Attach a request handler (and optional finite service queue) to a
        node port. handler(frame, flow) runs when a request is serviced."""
        node = self._nodes[node_id]
        if queue is None:
            node.services[port] = _ServiceRuntime(
                ServiceQueue(capacity=1_000_000, service_rate=1e9), handler, on_queue_drop)
            node.services[port].service_time_ns = 0
        else:
            node.services[port] = _ServiceRuntime(queue, handler, on_queue_drop)

    def open_flow(self, src: str, dst: str, dst_port: int = 502,
                  src_port: int | None = None, on_response=None) -> int:
        """Register a directed flow over the direct link between two nodes.

        Hosts do not forward, so reachability means sharing a segment link.
        Reopening an explicit 4-tuple bumps the connection ordinal.
        """
        if src not in self._nodes or dst not in self._nodes:
            raise Unreachable(f"unknown node in flow {src}->{dst}")
        link = self.direct_link(src, dst)
        if link is None:
            raise Unreachable(f"no route {src} -> {dst}")
        if src_port is None:
            nxt = self._ephemeral.get(src, 49152)
            self._ephemeral[src] = nxt + 1
            src_port = nxt
        key = (src, src_port, dst, dst_port)
        ordinal = self._flow_ordinals.get(key, 0)
        self._flow_ordinals[key] = ordinal + 1
        self._flow_seq += 1
        flow = Flow(self._flow_seq, src, src_port, dst, dst_port, ordinal, link, on_response)
        self._flows[flow.flow_id] = flow
        return flow.flow_id

    def flow(self, flow_id: int) -> Flow:
        return self._flows[flow_id]

    def flows_of(self, node_id: str):
        return [f for f in self._flows.values() if f.src == node_id and f.open]

    def close_flow(self, flow_id: int):
        self._flows[flow_id].open = False

    def send(self, flow_id: int, payload: bytes, origin: str) -> int:
        """Send one frame initiator -> responder. Returns the frame id."""
        return self._emit(flow_id, payload, origin, REQUEST)

    def reply(self, flow_id: int, payload: bytes, origin: str) -> int:
        """Send one frame responder -> initiator (bypasses the service queue)."""
        return self._emit(flow_id, payload, origin, RESPONSE)

    def _emit(self, flow_id: int, payload: bytes, origin: str, direction: str) -> int:
        flow = self._flows[flow_id]
        if not flow.open:
            raise FlowClosed(f"flow {flow_id} is closed")
        if len(payload) < 1:
            raise ValueError("frame payload must be at least 1 byte")
        self._frame_seq += 1
        frame = Frame(self._frame_seq, self.clock, flow_id, bytes(payload), origin)
        self.counters["sent"] += 1
        sender = flow.src if direction == REQUEST else flow.dst
        self._nodes[sender].frames_out += 1
        self._start_link_traversal(frame, flow, direction)
        return frame.frame_id

    # ------------------------------------------------------------------
    # link traversal, interposition, taps
    # ------------------------------------------------------------------

    def install_tap(self, link_id: str) -> Tap:
        if link_id not in self._links:
            raise ConfigError(f"no such link {link_id}")
        if link_id not in self._taps:
            self._taps[link_id] = Tap(link_id)
        return self._taps[link_id]

    def _observe(self, link: Link, hop: str, frame: Frame, disposition: str, direction: str):
        tap = self._taps.get(link.id)
        if tap is not None:
            tap.events.append(TapEvent(self.clock, hop, frame, disposition, direction))

    def interpose(self, attacker: str, link_id: str, callback,
                  latency_ns: int = DEFAULT_INTERPOSER_LATENCY_NS) -> InterposerHandle:
        """Route all subsequent frames on the link through the attacker.

        Taps then observe wire truth on each half-link: the original bytes on
        the sender side, whatever the callback forwarded on the other.
        """
        link = self._links[link_id]
        if attacker not in self._nodes:
            raise NotOnSegment(f"unknown attacker node {attacker}")
        if link.segment not in self.attached_segments(attacker):
            raise NotOnSegment(f"{attacker} is not attached to segment {link.segment!r}")
        if link_id in self._interposers:
            raise AlreadyInterposed(f"link {link_id} already interposed")
        handle = InterposerHandle(self, link, attacker, callback, latency_ns)
        self._interposers[link_id] = handle
        return handle

    def _half_hop_id(self, link: Link, endpoint: str) -> str:
        return f"{link.id}#{'a' if endpoint == link.a else 'b'}"

    def _start_link_traversal(self, frame: Frame, flow: Flow, direction: str):
        link = flow.link
        sender = flow.src if direction == REQUEST else flow.dst
        receiver = link.other(sender)
        lost = False
        if link.loss_prob > 0.0:
            lost = self._link_rng[link.id].random() < link.loss_prob

        handle = self._interposers.get(link.id)
        if handle is None or not handle.active:
            arrival = self.clock + link.latency_ns
            self.call_at(arrival, lambda: self._arrive(frame, flow, direction, link,
                                                       link.id, receiver, lost))
            return

        # First half: sender -> interposer.
        lat_a = link.latency_ns // 2 + handle.latency_ns
        hop_a = self._half_hop_id(link, sender)
        arrival = self.clock + lat_a
        self.call_at(arrival, lambda: self._reach_interposer(
            frame, flow, direction, handle, hop_a, receiver, lost))

    def _reach_interposer(self, frame, flow, direction, handle, hop_a, receiver, lost):
        link = handle.link
        if lost:
            self.counters["lost"] += 1
            self._observe(link, hop_a, frame, LOST, direction)
            return
        if not handle.active:
            # Interposer removed while the frame was in flight; complete the
            # traversal as a plain link.
            self._observe(link, hop_a, frame, DELIVERED, direction)
            remaining = link.latency_ns - link.latency_ns // 2
            self.call_at(self.clock + remaining,
                         lambda: self._arrive(frame, flow, direction, link,
                                              self._half_hop_id(link, receiver), receiver, False))
            return
        action, payload = handle.callback(frame, direction, flow)
        if action == "drop":
            self.counters["intercepted_dropped"] += 1
            self._observe(link, hop_a, frame, INTERCEPTED, direction)
            return
        if action == "modify":
            out_frame = replace(frame, payload=bytes(payload))
        elif action == "forward":
            out_frame = frame
        else:
            raise ValueError(f"interposer callback returned unknown action {action!r}")
        self._observe(link, hop_a, frame, DELIVERED, direction)
        lat_b = (link.latency_ns - link.latency_ns // 2) + handle.latency_ns
        hop_b = self._half_hop_id(link, receiver)
        self.call_at(self.clock + lat_b,
                     lambda: self._arrive(out_frame, flow, direction, link, hop_b,
                                          receiver, False))

    def _inject_from_interposer(self, handle: InterposerHandle, flow_id: int,
                                payload: bytes, origin: str, direction: str) -> int:
        flow = self._flows[flow_id]
        link = handle.link
        if flow.link.id != link.id:
            raise ConfigError(f"flow {flow_id} does not ride link {link.id}")
        self._frame_seq += 1
        frame = Frame(self._frame_seq, self.clock, flow_id, bytes(payload), origin)
        self.counters["sent"] += 1
        self._nodes[handle.attacker].frames_out += 1
        receiver = flow.dst if direction == REQUEST else flow.src
        lat_b = (link.latency_ns - link.latency_ns // 2) + handle.latency_ns
        hop_b = self._half_hop_id(link, receiver)
        self.call_at(self.clock + lat_b,
                     lambda: self._arrive(frame, flow, direction, link, hop_b, receiver, False))
        return frame.frame_id

    def _arrive(self, frame, flow, direction, link, hop, receiver, lost):
        if lost:
            self.counters["lost"] += 1
            self._observe(link, hop, frame, LOST, direction)
            return
        node = self._nodes[receiver]
        if direction == REQUEST:
            service = node.services.get(flow.dst_port)
            if service is not None:
                if service.depth >= service.spec.capacity:
                    self.counters["queue_dropped"] += 1
                    self._observe(link, hop, frame, QUEUE_DROPPED, direction)
                    if service.on_queue_drop is not None:
                        service.on_queue_drop(frame, flow)
                    return
                self.counters["delivered"] += 1
                node.frames_in += 1
                self._observe(link, hop, frame, DELIVERED, direction)
                self._enqueue_service(service, frame, flow)
                return
            # No server on that port: the frame hit the wire and died quietly.
            self.counters["delivered"] += 1
            node.frames_in += 1
            self._observe(link, hop, frame, DELIVERED, direction)
            return
        # Response direction: route to the flow opener's callback.
        self.counters["delivered"] += 1
        node.frames_in += 1
        self._observe(link, hop, frame, DELIVERED, direction)
        if flow.on_response is not None:
            flow.on_response(frame, flow)

    def _enqueue_service(self, service: _ServiceRuntime, frame, flow):
        service.pending.append((frame, flow))
        if not service.in_service:
            self._service_next(service)

    def _service_next(self, service: _ServiceRuntime):
        if not service.pending:
            service.in_service = False
            return
        service.in_service = True
        frame, flow = service.pending.popleft()
        if service.service_time_ns == 0:
            service.handler(frame, flow)
            self._service_next(service)
            return

        def complete():
            service.handler(frame, flow)
            self._service_next(service)

        self.call_at(self.clock + service.service_time_ns, complete)

    # ------------------------------------------------------------------
    # clock and scheduling
    # ------------------------------------------------------------------

    def call_at(self, ts_ns: int, fn) -> TimerHandle:
        if ts_ns < self.clock:
            raise TimeReversal(f"cannot schedule at {ts_ns} before clock {self.clock}")
        handle = TimerHandle()
        self._seq += 1
        heapq.heappush(self._events, (ts_ns, self._seq, fn, handle))
        return handle

    def call_after(self, delta_ns: int, fn) -> TimerHandle:
        return self.call_at(self.clock + delta_ns, fn)

    def post_command(self, fn):
        """Thread-safe external input; drained between events."""
        self._commands.append(fn)

    def _drain_commands(self):
        while self._commands:
            fn = self._commands.popleft()
            fn(self)

    def run_until(self, ts_ns: int) -> int:
        """Process every event with ts <= ts_ns in (ts, sequence) order, then
        land the clock exactly on ts_ns."""
        if ts_ns < self.clock:
            raise TimeReversal(f"run_until({ts_ns}) before clock {self.clock}")
        self._drain_commands()
        while self._events and self._events[0][0] <= ts_ns:
            ts, _seq, fn, handle = heapq.heappop(self._events)
            if handle.cancelled:
                continue
            self.clock = ts
            fn()
            self._drain_commands()
        self.clock = ts_ns
        return self.clock

    # ------------------------------------------------------------------
    # stats
    # ------------------------------------------------------------------

    def node_stats(self, node_id: str) -> dict:
        node = self._nodes[node_id]
        return {
            "frames_in": node.frames_in,
            "frames_out": node.frames_out,
            "open_flows": sum(1 for f in self._flows.values() if f.open and f.src == node_id),
            "queue_depth": sum(s.depth for s in node.services.values()),
        }


def create_fabric(topology, seed: int) -> Fabric:
    """Build a fabric from a validated topology graph (duck-typed: needs
    .nodes with id/address and .links with Link-compatible fields)."""
    addresses = {}
    for node in topology.nodes:
        addresses[node.id] = node.address
    links = [Link(l.id, l.a, l.b, l.latency_ns, l.loss_prob, l.segment)
             for l in topology.links]
    return Fabric(addresses, links, seed)
