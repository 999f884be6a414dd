"""Executable attack actors.

Each actor consumes one scheduled step, manipulates the fabric or protocol
layer, and emits provenance events that later become dataset labels. Every
frame an actor creates carries its attack id as the frame origin; every
frame it alters or forwards is referenced in exactly one event, so labeling
is a join, not a heuristic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import modbus
from .coordinator import AttackView
from .endpoint import ModbusClientPort
from .errors import ActorError
from .fabric import NS_PER_S, Fabric, REQUEST, RESPONSE
from .planner import DIRECT_SPOOF, DOS, MITM, RECON, REPLAY, SPOOF

log = logging.getLogger(__name__)

PHASE_SETUP = "setup"
PHASE_ACTIVE = "active"
PHASE_TEARDOWN = "teardown"

TAMPER_INJECTED = "injected"
TAMPER_MODIFIED = "modified"
TAMPER_DROPPED = "dropped"
TAMPER_OBSERVED = "observed"


@dataclass
class AttackEvent:
    attack_id: str
    kind: str
    phase: str
    ts_ns: int
    frame_refs: list = field(default_factory=list)  # [{"frame_id": int, "tamper": str}]


@dataclass
class ObservedRequest:
    flow_id: int
    payload: bytes
    transaction_id: int
    ts_ns: int


class AttackerRuntime:
    """State shared between actors of one attacker: the observed register
    maps from recon, live interposers from MITM, and captured requests that
    replay feeds on."""

    def __init__(self, fabric: Fabric, view: AttackView, event_sink: list):
        self.fabric = fabric
        self.view = view
        self.attacker = view.attacker
        self.events = event_sink
        self.observed_maps: dict[str, dict] = {}
        self.boundaries: dict[str, list] = {}
        self.interposers: dict[str, object] = {}
        self.mitm_actors: dict[str, MitmActor] = {}
        self.observed_requests: dict[tuple, ObservedRequest] = {}

    def emit(self, attack_id: str, kind: str, phase: str, refs=None):
        self.events.append(AttackEvent(attack_id, kind, phase, self.fabric.clock,
                                       list(refs or [])))


def build_actor(runtime: AttackerRuntime, step, end_ns: int):
    kind = step.kind
    if kind == RECON:
        return ReconActor(runtime, step)
    if kind == MITM:
        return MitmActor(runtime, step, end_ns)
    if kind in (SPOOF, DIRECT_SPOOF):
        return SpoofActor(runtime, step)
    if kind == REPLAY:
        return ReplayActor(runtime, step)
    if kind == DOS:
        return DosActor(runtime, step)
    raise ActorError(f"no actor for step kind {kind!r}")


def launch_schedules(fabric: Fabric, view: AttackView, schedules: list,
                     event_sink: list, end_ns: int) -> AttackerRuntime:
    """Wire every timed step to a fabric timer. Returns the shared runtime."""
    runtime = AttackerRuntime(fabric, view, event_sink)
    for sched in schedules:
        for step in sched.steps:
            actor = build_actor(runtime, step, end_ns)
            fabric.call_at(round(step.start_s * NS_PER_S), actor.start)
    return runtime


class ReconActor:
    """Register sweep: quantity-1 holding and input reads over the first
    sweep_len addresses, building the attacker's observed map. Exception
    responses mark the bank boundaries of a decoy."""

    def __init__(self, runtime: AttackerRuntime, step):
        self.rt = runtime
        self.step = step
        self.attack_id = step.attack_id
        self.service = step.params["target"]
        self.sweep_len = int(step.params["sweep_len"])
        self.gap_ns = round(NS_PER_S / step.params["rate_per_s"])
        self.refs = []
        self.replies = 0

    def start(self):
        node = self.rt.view.services[self.service]["node"]
        port = self.rt.view.services[self.service]["port"]
        self.rt.emit(self.attack_id, RECON, PHASE_SETUP)
        self.client = ModbusClientPort(self.rt.fabric, self.rt.attacker, node,
                                       origin=self.attack_id, dst_port=port)
        self.rt.observed_maps.setdefault(self.service, {})
        self.rt.boundaries.setdefault(self.service, [])
        plan = []
        for bank, function in (("holding", modbus.READ_HOLDING_REGISTERS),
                               ("input", modbus.READ_INPUT_REGISTERS)):
            for addr in range(self.sweep_len):
                plan.append((bank, function, addr))
        self._queue = plan
        self._next_request()

    def _next_request(self):
        if not self._queue:
            # Grace for the final response before teardown.
            self.rt.fabric.call_after(self.gap_ns * 2, self._finish)
            return
        bank, function, addr = self._queue.pop(0)
        frame_id = self.client.request(
            modbus.ReadRequest(function, addr, 1),
            timeout_ns=self.gap_ns * 5,
            on_reply=lambda adu, pending, bank=bank, addr=addr: self._on_reply(adu, bank, addr),
        )
        self.refs.append({"frame_id": frame_id, "tamper": TAMPER_INJECTED})
        self.rt.fabric.call_after(self.gap_ns, self._next_request)

    def _on_reply(self, adu, bank, addr):
        self.replies += 1
        if modbus.is_exception(adu.pdu):
            self.rt.boundaries[self.service].append((bank, addr, adu.pdu.code))
            return
        if isinstance(adu.pdu, modbus.ReadRegistersResponse) and adu.pdu.values:
            self.rt.observed_maps[self.service][(bank, addr)] = adu.pdu.values[0]

    def _finish(self):
        self.rt.emit(self.attack_id, RECON, PHASE_ACTIVE, self.refs)
        self.rt.emit(self.attack_id, RECON, PHASE_TEARDOWN)


class MitmActor:
    """Interpose a link in pass-through mode. Forwarded frames are tagged
    observed; the request log it builds feeds spoof and replay."""

    def __init__(self, runtime: AttackerRuntime, step, end_ns: int):
        self.rt = runtime
        self.step = step
        self.attack_id = step.attack_id
        self.link_id = step.params["link"]
        self.end_ns = end_ns
        self.refs = []
        self.request_log: dict[tuple, dict] = {}  # flow key -> tid -> ReadRequest
        self.rewriters: list = []
        self.handle = None

    def start(self):
        if self.link_id in self.rt.interposers:
            raise ActorError(f"link {self.link_id} already interposed (schedule bug)")
        self.rt.emit(self.attack_id, MITM, PHASE_SETUP)
        self.handle = self.rt.fabric.interpose(self.rt.attacker, self.link_id, self._on_frame)
        self.rt.interposers[self.link_id] = self.handle
        self.rt.mitm_actors[self.link_id] = self
        self._flush_timer()
        self.rt.fabric.call_at(self.end_ns, self.teardown)

    def _flush_timer(self):
        if self.refs:
            self.rt.emit(self.attack_id, MITM, PHASE_ACTIVE, self.refs)
            self.refs = []
        if self.handle is not None and self.handle.active:
            next_ts = self.rt.fabric.clock + 5 * NS_PER_S
            if next_ts < self.end_ns:
                self.rt.fabric.call_at(next_ts, self._flush_timer)

    def _on_frame(self, frame, direction, flow):
        self._track(frame, direction, flow)
        for rewriter in self.rewriters:
            replacement = rewriter(frame, direction, flow, self)
            if replacement is not None:
                return ("modify", replacement)
        self.refs.append({"frame_id": frame.frame_id, "tamper": TAMPER_OBSERVED})
        return ("forward", None)

    def _track(self, frame, direction, flow):
        key = (flow.src, flow.dst)
        if direction == REQUEST:
            decoded = modbus.decode(frame.payload, kind="request")
            if isinstance(decoded, tuple):
                adu, _ = decoded
                self.request_log.setdefault(key, {})[adu.transaction_id] = adu.pdu
                self.rt.observed_requests[key] = ObservedRequest(
                    flow.flow_id, frame.payload, adu.transaction_id, frame.ts_ns)

    def request_for(self, flow, adu):
        return self.request_log.get((flow.src, flow.dst), {}).get(adu.transaction_id)

    def teardown(self):
        if self.handle is None or not self.handle.active:
            return
        self.handle.remove()
        self.rt.interposers.pop(self.link_id, None)
        if self.refs:
            self.rt.emit(self.attack_id, MITM, PHASE_ACTIVE, self.refs)
            self.refs = []
        self.rt.emit(self.attack_id, MITM, PHASE_TEARDOWN)


class SpoofActor:
    """Falsify one tag for its viewer.

    rewrite mode leans on an active interposer: read responses covering the
    tag's register get that one value replaced (true value + offset, or an
    absolute), with the MBAP length untouched. direct_write mode forges a
    WriteSingleRegister toward the server every second instead.
    """

    def __init__(self, runtime: AttackerRuntime, step):
        self.rt = runtime
        self.step = step
        self.attack_id = step.attack_id
        self.tag = runtime.view.tags[step.params["tag"]]
        self.mode = step.params.get("mode", "rewrite")
        self.offset = int(step.params.get("offset", 500))
        self.absolute = step.params.get("absolute")
        self.window_ns = round(float(step.params["window_s"]) * NS_PER_S)
        self.refs = []
        self.modified = 0

    def start(self):
        if self.mode == "rewrite":
            self._start_rewrite()
        else:
            self._start_direct()

    # -- rewrite ---------------------------------------------------------

    def _start_rewrite(self):
        mitm = self.rt.mitm_actors.get(self.tag.link_id)
        if mitm is None or mitm.handle is None or not mitm.handle.active:
            raise ActorError(f"spoof on {self.tag.name} needs an active interposer "
                             f"on {self.tag.link_id}")
        observed = self.rt.observed_maps.get(self.tag.service)
        if observed is None or (self.tag.bank, self.tag.addr) not in observed:
            raise ActorError(f"spoof on {self.tag.name} has no observed map for "
                             f"{self.tag.service} (recon missing)")
        self.rt.emit(self.attack_id, SPOOF, PHASE_SETUP)
        self._mitm = mitm
        self._until = self.rt.fabric.clock + self.window_ns
        mitm.rewriters.append(self._rewrite)
        self.rt.fabric.call_at(self._until, self._finish_rewrite)

    def _rewrite(self, frame, direction, flow, mitm):
        if direction != RESPONSE or self.rt.fabric.clock > self._until:
            return None
        # Only responses heading to the tag's viewer matter.
        if flow.src != self.tag.viewer:
            return None
        decoded = modbus.decode(frame.payload, kind="response")
        if not isinstance(decoded, tuple):
            return None
        adu, consumed = decoded
        if consumed != len(frame.payload):
            return None
        if not isinstance(adu.pdu, modbus.ReadRegistersResponse):
            return None
        request = mitm.request_for(flow, adu)
        if not isinstance(request, modbus.ReadRequest):
            return None
        want = modbus.READ_INPUT_REGISTERS if self.tag.bank == "input" \
            else modbus.READ_HOLDING_REGISTERS
        if request.function != want:
            return None
        if not request.address <= self.tag.addr < request.address + request.quantity:
            return None
        index = self.tag.addr - request.address
        true_value = adu.pdu.values[index]
        fake = self.absolute if self.absolute is not None else true_value + self.offset
        fake &= 0xFFFF
        offset_in_payload = 7 + 2 + 2 * index  # MBAP + (fc, byte count)
        mutated = bytearray(frame.payload)
        mutated[offset_in_payload] = fake >> 8
        mutated[offset_in_payload + 1] = fake & 0xFF
        self.refs.append({"frame_id": frame.frame_id, "tamper": TAMPER_MODIFIED})
        self.modified += 1
        return bytes(mutated)

    def _finish_rewrite(self):
        self._mitm.rewriters.remove(self._rewrite)
        self.rt.emit(self.attack_id, SPOOF, PHASE_ACTIVE, self.refs)
        self.rt.emit(self.attack_id, SPOOF, PHASE_TEARDOWN)

    # -- direct write ----------------------------------------------------

    def _start_direct(self):
        observed = self.rt.observed_maps.get(self.tag.service)
        if observed is None:
            raise ActorError(f"direct spoof on {self.tag.name} has no observed map "
                             f"(recon missing)")
        self.rt.emit(self.attack_id, DIRECT_SPOOF, PHASE_SETUP)
        node = self.rt.view.services[self.tag.service]["node"]
        port = self.rt.view.services[self.tag.service]["port"]
        self.client = ModbusClientPort(self.rt.fabric, self.rt.attacker, node,
                                       origin=self.attack_id, dst_port=port)
        self.exceptions = []
        self._until = self.rt.fabric.clock + self.window_ns
        self._write_tick(observed)

    def _write_tick(self, observed):
        if self.rt.fabric.clock >= self._until:
            self.rt.emit(self.attack_id, DIRECT_SPOOF, PHASE_ACTIVE, self.refs)
            self.rt.emit(self.attack_id, DIRECT_SPOOF, PHASE_TEARDOWN)
            return
        if self.absolute is not None:
            value = int(self.absolute)
        else:
            base = observed.get((self.tag.bank, self.tag.addr), 0)
            value = base + self.offset
        if self.tag.bank == "coils":
            pdu = modbus.coil_write(self.tag.addr, bool(value))
        else:
            pdu = modbus.WriteSingleRegister(self.tag.addr, value & 0xFFFF)
        frame_id = self.client.request(
            pdu,
            timeout_ns=NS_PER_S // 2,
            on_reply=lambda adu, pending: self._on_write_reply(adu),
        )
        self.refs.append({"frame_id": frame_id, "tamper": TAMPER_INJECTED})
        self.rt.fabric.call_after(NS_PER_S, lambda: self._write_tick(observed))

    def _on_write_reply(self, adu):
        if modbus.is_exception(adu.pdu):
            self.exceptions.append(adu.pdu.code)


class ReplayActor:
    """Re-inject the last observed request on a flow, count times at fixed
    spacing. Payload bytes stay identical except the transaction id when
    refresh is on (the default)."""

    def __init__(self, runtime: AttackerRuntime, step):
        self.rt = runtime
        self.step = step
        self.attack_id = step.attack_id
        self.flow_name = step.params["flow"]
        self.link_id = step.params["link"]
        self.count = int(step.params["count"])
        self.spacing_ns = round(float(step.params["spacing_s"]) * NS_PER_S)
        self.refresh_tid = bool(step.params["refresh_tid"])
        self.refs = []

    def start(self):
        flow_info = self.rt.view.flows[self.flow_name]
        observed = self.rt.observed_requests.get((flow_info.src, flow_info.dst))
        if observed is None:
            raise ActorError(f"replay on {self.flow_name}: nothing observed yet")
        handle = self.rt.interposers.get(self.link_id)
        if handle is None or not handle.active:
            raise ActorError(f"replay on {self.flow_name}: interposer gone")
        self.rt.emit(self.attack_id, REPLAY, PHASE_SETUP)
        self._observed = observed
        self._handle = handle
        self._sent = 0
        self._tick()

    def _tick(self):
        if self._sent >= self.count:
            self.rt.emit(self.attack_id, REPLAY, PHASE_ACTIVE, self.refs)
            self.rt.emit(self.attack_id, REPLAY, PHASE_TEARDOWN)
            return
        payload = self._observed.payload
        if self.refresh_tid:
            fresh = (self._observed.transaction_id + 1 + self._sent) & 0xFFFF
            payload = bytes([fresh >> 8, fresh & 0xFF]) + payload[2:]
        frame_id = self._handle.inject(self._observed.flow_id, payload,
                                       origin=self.attack_id, direction=REQUEST)
        self.refs.append({"frame_id": frame_id, "tamper": TAMPER_INJECTED})
        self._sent += 1
        self.rt.fabric.call_after(self.spacing_ns, self._tick)


class DosActor:
    """Flood minimal valid reads at a fixed rate; the victim's finite service
    queue does the damage."""

    def __init__(self, runtime: AttackerRuntime, step):
        self.rt = runtime
        self.step = step
        self.attack_id = step.attack_id
        self.service = step.params["target"]
        self.rate = float(step.params["rate_per_s"])
        self.window_ns = round(float(step.params["window_s"]) * NS_PER_S)
        self.refs = []

    def start(self):
        self.rt.emit(self.attack_id, DOS, PHASE_SETUP)
        node = self.rt.view.services[self.service]["node"]
        port = self.rt.view.services[self.service]["port"]
        self._flow = self.rt.fabric.open_flow(self.rt.attacker, node, port)
        self._gap_ns = round(NS_PER_S / self.rate)
        self._until = self.rt.fabric.clock + self.window_ns
        self._tid = 0
        if self.window_ns > 0:
            self._tick()
        else:
            self._finish()

    def _tick(self):
        if self.rt.fabric.clock >= self._until:
            self._finish()
            return
        self._tid = (self._tid + 1) & 0xFFFF
        adu = modbus.Adu(self._tid, 1,
                         modbus.ReadRequest(modbus.READ_HOLDING_REGISTERS, 0, 1))
        frame_id = self.rt.fabric.send(self._flow, modbus.encode(adu), self.attack_id)
        self.refs.append({"frame_id": frame_id, "tamper": TAMPER_INJECTED})
        self.rt.fabric.call_after(self._gap_ns, self._tick)

    def _finish(self):
        self.rt.emit(self.attack_id, DOS, PHASE_ACTIVE, self.refs)
        self.rt.emit(self.attack_id, DOS, PHASE_TEARDOWN)
