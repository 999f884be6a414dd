"""Data collection: taps on every link, protocol enrichment, provenance
labeling, and the output files (PCAP, JSONL dataset/metrics/logs, manifest).

Every tap event becomes one dataset row and one PCAP frame, so row counts
match by construction; labels come from joining attack-event frame
references on frame id, never from inspecting payload bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

from . import modbus
from .errors import IntegrityError
from .fabric import NS_PER_S, Fabric, REQUEST
from .pcap import PcapWriter

log = logging.getLogger(__name__)

LABEL_BENIGN = "benign"

PROTO_MODBUS = "modbus_tcp"
PROTO_NOISE = "noise"
PROTO_OTHER = "other"

# Documented dataset row key order; rows are emitted exactly in this shape.
DATASET_KEYS = ("frame_id", "ts_ns", "src_ip", "src_port", "dst_ip", "dst_port",
                "link_id", "disposition", "protocol", "modbus", "label",
                "attack_id", "phase", "tamper")


@dataclass
class LogRecord:
    ts_ns: int
    component_id: str
    severity: str
    message: str
    fields: dict


class LogSink:
    """Append-only, time-ordered log collector shared by all components."""

    def __init__(self, fabric: Fabric):
        self.fabric = fabric
        self.records: list[LogRecord] = []

    def emit(self, component_id: str, severity: str, message: str, **fields):
        self.records.append(LogRecord(self.fabric.clock, component_id, severity,
                                      message, fields))


@dataclass
class MetricSample:
    ts_ns: int
    component_id: str
    frames_in: int
    frames_out: int
    open_flows: int
    queue_depth: int
    active_tasks: int
    scan_duration_ns: int | None = None


class MetricsCollector:
    """Samples per-component counters once per virtual second."""

    def __init__(self, fabric: Fabric, components: dict, stop_ns: int):
        self.fabric = fabric
        self.components = components  # id -> component object or None
        self.stop_ns = stop_ns
        self.samples: list[MetricSample] = []
        fabric.call_at(0, self._tick)

    def _tick(self):
        for component_id, component in self.components.items():
            stats = self.fabric.node_stats(component_id)
            self.samples.append(MetricSample(
                ts_ns=self.fabric.clock,
                component_id=component_id,
                frames_in=stats["frames_in"],
                frames_out=stats["frames_out"],
                open_flows=stats["open_flows"],
                queue_depth=stats["queue_depth"],
                active_tasks=getattr(component, "active_tasks", 0),
                scan_duration_ns=getattr(component, "last_scan_duration_ns", None),
            ))
        next_ts = self.fabric.clock + NS_PER_S
        if next_ts <= self.stop_ns:
            self.fabric.call_at(next_ts, self._tick)


@dataclass
class Observation:
    """One tap event resolved against its flow: the unit of the dataset."""
    frame_id: int
    ts_ns: int
    link_id: str
    disposition: str
    direction: str
    flow_id: int
    src_node: str
    dst_node: str
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    payload: bytes
    origin: str


class CaptureStore:
    """Installs a tap on every link and assembles the global observation
    stream, ordered by (ts, frame id)."""

    def __init__(self, fabric: Fabric):
        self.fabric = fabric
        self.taps = [fabric.install_tap(link.id) for link in fabric.links]

    def observations(self) -> list:
        rows = []
        for tap in self.taps:
            for event in tap.events:
                flow = self.fabric.flow(event.frame.flow_id)
                if event.direction == REQUEST:
                    src_node, dst_node = flow.src, flow.dst
                    src_port, dst_port = flow.src_port, flow.dst_port
                else:
                    src_node, dst_node = flow.dst, flow.src
                    src_port, dst_port = flow.dst_port, flow.src_port
                rows.append(Observation(
                    frame_id=event.frame.frame_id,
                    ts_ns=event.ts_ns,
                    link_id=event.link,
                    disposition=event.disposition,
                    direction=event.direction,
                    flow_id=flow.flow_id,
                    src_node=src_node,
                    dst_node=dst_node,
                    src_ip=self.fabric.address_of(src_node),
                    src_port=src_port,
                    dst_ip=self.fabric.address_of(dst_node),
                    dst_port=dst_port,
                    payload=event.frame.payload,
                    origin=event.frame.origin,
                ))
        rows.sort(key=lambda o: (o.ts_ns, o.frame_id, o.link_id))
        return rows


def enrich(observation: Observation) -> tuple:
    """(protocol, modbus-fields-or-None). Never fails: anything undecodable
    is protocol 'other' with null fields."""
    if observation.origin.startswith("noise"):
        return PROTO_NOISE, None
    kind = "request" if observation.direction == REQUEST else "response"
    result = modbus.decode(observation.payload, kind=kind)
    if not isinstance(result, tuple):
        return PROTO_OTHER, None
    adu, consumed = result
    if consumed != len(observation.payload):
        return PROTO_OTHER, None
    pdu = adu.pdu
    fields = {
        "tid": adu.transaction_id,
        "uid": adu.unit_id,
        "function": getattr(pdu, "function", None),
        "address": getattr(pdu, "address", None),
        "quantity_or_value": None,
        "exception_code": None,
    }
    if isinstance(pdu, modbus.ReadRequest):
        fields["quantity_or_value"] = pdu.quantity
    elif isinstance(pdu, (modbus.WriteSingleCoil, modbus.WriteSingleRegister)):
        fields["quantity_or_value"] = pdu.value
    elif isinstance(pdu, modbus.WriteMultipleRegistersRequest):
        fields["quantity_or_value"] = len(pdu.values)
    elif isinstance(pdu, modbus.WriteMultipleRegistersResponse):
        fields["quantity_or_value"] = pdu.quantity
    elif isinstance(pdu, modbus.ReadRegistersResponse):
        fields["quantity_or_value"] = pdu.values[0] if pdu.values else None
    elif isinstance(pdu, modbus.ReadBitsResponse):
        fields["quantity_or_value"] = int(pdu.bits[0]) if pdu.bits else None
    elif isinstance(pdu, modbus.ExceptionResponse):
        fields["exception_code"] = pdu.code
    return PROTO_MODBUS, fields


def label_rows(observations: list, attack_events: list) -> list:
    """Join observations with attack provenance into dataset rows.

    Labeling is total: a frame reference naming an unobserved frame id is an
    integrity failure, and any frame outside every event is benign.
    """
    known = {o.frame_id for o in observations}
    by_frame = {}
    for event in attack_events:
        for ref in event.frame_refs:
            frame_id = ref["frame_id"]
            if frame_id not in known:
                raise IntegrityError(
                    f"attack event {event.attack_id} references unknown frame {frame_id}")
            if frame_id in by_frame:
                raise IntegrityError(
                    f"frame {frame_id} referenced by more than one attack event")
            by_frame[frame_id] = (event, ref)

    rows = []
    for obs in observations:
        protocol, fields = enrich(obs)
        hit = by_frame.get(obs.frame_id)
        if hit is None:
            label, attack_id, phase, tamper = LABEL_BENIGN, None, None, None
        else:
            event, ref = hit
            label, attack_id, phase, tamper = (event.kind, event.attack_id,
                                               event.phase, ref["tamper"])
        rows.append({
            "frame_id": obs.frame_id,
            "ts_ns": obs.ts_ns,
            "src_ip": obs.src_ip,
            "src_port": obs.src_port,
            "dst_ip": obs.dst_ip,
            "dst_port": obs.dst_port,
            "link_id": obs.link_id,
            "disposition": obs.disposition,
            "protocol": protocol,
            "modbus": fields,
            "label": label,
            "attack_id": attack_id,
            "phase": phase,
            "tamper": tamper,
        })
    return rows


def write_jsonl(path, rows) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    return len(rows)


def write_pcap(path, observations: list, node_ordinals: dict) -> int:
    writer = PcapWriter(node_ordinals)
    for obs in observations:
        writer.add(obs.ts_ns, obs.frame_id, obs.flow_id,
                   obs.direction == REQUEST, obs.src_node, obs.dst_node,
                   obs.src_ip, obs.src_port, obs.dst_ip, obs.dst_port, obs.payload)
    writer.write(path)
    return len(writer.records)


def attack_events_rows(attack_events: list) -> list:
    return [
        {"attack_id": e.attack_id, "kind": e.kind, "phase": e.phase,
         "ts_ns": e.ts_ns, "frame_refs": e.frame_refs}
        for e in attack_events
    ]


def metrics_rows(samples: list) -> list:
    return [
        {"ts_ns": s.ts_ns, "component_id": s.component_id, "frames_in": s.frames_in,
         "frames_out": s.frames_out, "open_flows": s.open_flows,
         "queue_depth": s.queue_depth, "active_tasks": s.active_tasks,
         "scan_duration_ns": s.scan_duration_ns}
        for s in samples
    ]


def log_rows(records: list) -> list:
    return [
        {"ts_ns": r.ts_ns, "component_id": r.component_id, "severity": r.severity,
         "message": r.message, "fields": r.fields}
        for r in records
    ]


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, *, config_bytes: bytes, seed: int, mode: str,
                   duration_s: float, end_clock_ns: int, counts: dict,
                   files: dict, wall_clock_offset_s: float | None = None) -> dict:
    manifest = {
        "version": 1,
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "seed": seed,
        "mode": mode,
        "duration_s": duration_s,
        "end_clock_ns": end_clock_ns,
        "counts": counts,
        "digests": {name: sha256_file(p) for name, p in files.items()},
    }
    if wall_clock_offset_s is not None:
        manifest["wall_clock_offset_s"] = wall_clock_offset_s
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
