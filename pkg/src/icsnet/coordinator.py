"""Setup-phase coordination: scenario file -> validated config -> topology
graph -> per-component configs and the attacker-facing architecture view.

Everything here is a pure function of the scenario bytes and runs strictly
before the simulation starts; nothing in this module is touched at runtime.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

from .errors import CapacityError, ValidationError
from .fabric import Link
from .plant import PlantParams
from .plc import ScanConfig, Setpoints

log = logging.getLogger(__name__)

MODBUS_PORT = 502
MAX_HOSTS_PER_SEGMENT = 253

KIND_PLANT = "Plant"
KIND_PLC = "PLC"
KIND_HMI = "HMI"
KIND_ATTACKER = "Attacker"

DEFAULT_LATENCY_NS = 500_000

DEFAULT_SETPOINTS = {"p_set": 2600, "t_set": 3100}
DEFAULT_LIMITS = {"p_set_kpa": [0.0, 650.0], "t_set_k": [0.0, 650.0]}

_PLANT_PARAM_KEYS = {
    "n_mol", "volume_m3", "t_ambient_k", "heat_rate_k_per_s",
    "cool_coeff_per_s", "dt_s", "sensor_noise_t_k", "sensor_noise_p_pa",
}


# ---------------------------------------------------------------------------
# scenario config
# ---------------------------------------------------------------------------

@dataclass
class ServiceSpec:
    capacity: int = 16
    service_rate: float = 100.0
    busy_reply: bool = False


@dataclass
class PlantSpec:
    id: str
    params: PlantParams = field(default_factory=PlantParams)
    registers: dict = field(default_factory=lambda: {"coils": 8, "discrete_inputs": 8,
                                                     "holding": 8, "input": 8})
    service: ServiceSpec = field(default_factory=ServiceSpec)
    model: str = "gas_container"  # reserved for future simulations


@dataclass
class PlcSpec:
    id: str
    plant_ref: str
    setpoints: Setpoints = field(default_factory=lambda: Setpoints(**DEFAULT_SETPOINTS))
    scan: ScanConfig = field(default_factory=ScanConfig)
    service: ServiceSpec = field(default_factory=ServiceSpec)


@dataclass
class HmiSpec:
    id: str = "hmi"
    poll_period_s: float = 1.0
    read_timeout_s: float = 0.5
    limits: dict = field(default_factory=lambda: dict(DEFAULT_LIMITS))


@dataclass
class AttackerSpec:
    id: str = "attacker"
    segment: str = "control"


@dataclass
class NoiseSpec:
    src: str
    dst: str
    rate_per_s: float = 2.0
    payload_len: int = 64
    dst_port: int = 9999


@dataclass
class GoalSpec:
    kind: str
    target: str
    viewer: str = ""
    params: dict = field(default_factory=dict)


@dataclass
class LinkSpec:
    a: str
    b: str
    segment: str = ""
    latency_us: float = 500.0
    loss_prob: float = 0.0


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 600.0
    mode: str = "fast"
    plants: list = field(default_factory=list)
    plcs: list = field(default_factory=list)
    hmi: HmiSpec = field(default_factory=HmiSpec)
    attacker: AttackerSpec = field(default_factory=AttackerSpec)
    links: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    goals: list = field(default_factory=list)
    outputs: dict = field(default_factory=lambda: {"dir": "out"})
    gateway: dict = field(default_factory=lambda: {"bind": "127.0.0.1:8700"})
    attack_defaults: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    raw: dict = field(default_factory=dict)


GOAL_KINDS = ("knows_map", "on_path", "spoofed", "degraded", "replayed")


def _take(raw: dict, known: set, where: str, warnings: list) -> None:
    for key in raw:
        if key not in known:
            warnings.append(f"{where}: unknown field {key!r} ignored")


def parse_scenario(data) -> ScenarioConfig:
    """Parse and validate a scenario (bytes, str, or an already-loaded dict).

    Validation is exhaustive: every violation is collected and reported in
    one ValidationError rather than stopping at the first.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    if isinstance(data, str):
        try:
            raw = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ValidationError([f"scenario is not valid JSON: {exc}"]) from exc
    else:
        raw = dict(data)
    if not isinstance(raw, dict):
        raise ValidationError(["scenario root must be a JSON object"])

    problems: list[str] = []
    warnings: list[str] = []
    cfg = ScenarioConfig(raw=raw)
    _take(raw, {"seed", "duration_s", "mode", "plants", "plcs", "hmi", "attacker",
                "links", "noise", "goals", "outputs", "gateway", "attack_defaults"},
          "scenario", warnings)

    cfg.seed = int(raw.get("seed", 0))
    if not 0 <= cfg.seed < 2 ** 64:
        problems.append("seed: must fit in 64 bits unsigned")
    cfg.duration_s = float(raw.get("duration_s", 600.0))
    if cfg.duration_s <= 0:
        problems.append("duration_s: must be > 0")
    cfg.mode = raw.get("mode", "fast")
    if cfg.mode not in ("fast", "paced"):
        problems.append(f"mode: {cfg.mode!r} is not one of fast, paced")

    # plants accepts either a count (expanded to defaults) or a list.
    plants_raw = raw.get("plants", 1)
    if isinstance(plants_raw, int):
        plants_raw = [{"id": f"plant{i + 1}"} for i in range(plants_raw)]
    if not isinstance(plants_raw, list) or not plants_raw:
        problems.append("plants: need a count or a non-empty list")
        plants_raw = [{"id": "plant1"}]
    for i, entry in enumerate(plants_raw):
        where = f"plants[{i}]"
        _take(entry, {"id", "params", "registers", "service", "model"}, where, warnings)
        pid = entry.get("id", f"plant{i + 1}")
        params_raw = dict(entry.get("params", {}))
        _take(params_raw, _PLANT_PARAM_KEYS, f"{where}.params", warnings)
        params = PlantParams(**{k: v for k, v in params_raw.items() if k in _PLANT_PARAM_KEYS})
        for p in params.validate():
            problems.append(f"{where}.params: {p}")
        spec = PlantSpec(id=pid, params=params)
        if "registers" in entry:
            spec.registers.update(entry["registers"])
        if "service" in entry:
            spec.service = ServiceSpec(**entry["service"])
        if "model" in entry:
            spec.model = entry["model"]
            if spec.model != "gas_container":
                problems.append(f"{where}.model: only gas_container is implemented")
        cfg.plants.append(spec)

    plcs_raw = raw.get("plcs")
    if plcs_raw is None:
        plcs_raw = [{"id": f"plc{i + 1}", "plant_ref": spec.id}
                    for i, spec in enumerate(cfg.plants)]
    for i, entry in enumerate(plcs_raw):
        where = f"plcs[{i}]"
        _take(entry, {"id", "plant_ref", "setpoints", "scan", "service"}, where, warnings)
        pid = entry.get("id", f"plc{i + 1}")
        plant_ref = entry.get("plant_ref")
        if plant_ref is None:
            problems.append(f"{where}.plant_ref: missing required field")
            plant_ref = ""
        setpoints_raw = dict(DEFAULT_SETPOINTS)
        setpoints_raw.update(entry.get("setpoints", {}))
        scan_raw = entry.get("scan", {})
        scan = ScanConfig(**scan_raw)
        for p in scan.validate():
            problems.append(f"{where}.scan: {p}")
        spec = PlcSpec(id=pid, plant_ref=plant_ref,
                       setpoints=Setpoints(int(setpoints_raw["p_set"]),
                                           int(setpoints_raw["t_set"])),
                       scan=scan)
        if "service" in entry:
            spec.service = ServiceSpec(**entry["service"])
        cfg.plcs.append(spec)

    hmi_raw = dict(raw.get("hmi", {}))
    _take(hmi_raw, {"id", "poll_period_s", "read_timeout_s", "limits"}, "hmi", warnings)
    cfg.hmi = HmiSpec(
        id=hmi_raw.get("id", "hmi"),
        poll_period_s=float(hmi_raw.get("poll_period_s", 1.0)),
        read_timeout_s=float(hmi_raw.get("read_timeout_s", 0.5)),
    )
    if "limits" in hmi_raw:
        cfg.hmi.limits.update(hmi_raw["limits"])
    if cfg.hmi.poll_period_s <= 0:
        problems.append("hmi.poll_period_s: must be > 0")
    if not 0 < cfg.hmi.read_timeout_s <= cfg.hmi.poll_period_s:
        problems.append("hmi.read_timeout_s: must sit inside (0, poll_period_s]")

    attacker_raw = dict(raw.get("attacker", {}))
    _take(attacker_raw, {"id", "segment"}, "attacker", warnings)
    cfg.attacker = AttackerSpec(
        id=attacker_raw.get("id", "attacker"),
        segment=attacker_raw.get("segment", "control"),
    )

    ids = [p.id for p in cfg.plants] + [p.id for p in cfg.plcs] + [cfg.hmi.id, cfg.attacker.id]
    seen = set()
    for node_id in ids:
        if node_id in seen:
            problems.append(f"duplicate component id {node_id!r}")
        seen.add(node_id)

    plant_ids = {p.id for p in cfg.plants}
    for i, plc_spec in enumerate(cfg.plcs):
        if plc_spec.plant_ref and plc_spec.plant_ref not in plant_ids:
            problems.append(f"plcs[{i}].plant_ref: {plc_spec.plant_ref!r} does not name a plant")

    field_segments = {f"field.{p.id}" for p in cfg.plants}
    valid_segments = {"control", "isolated"} | field_segments
    if cfg.attacker.segment not in valid_segments:
        problems.append(f"attacker.segment: {cfg.attacker.segment!r} is not one of "
                        f"control, isolated, or field.<plant id>")

    for i, entry in enumerate(raw.get("links", [])):
        where = f"links[{i}]"
        _take(entry, {"a", "b", "segment", "latency_us", "loss_prob"}, where, warnings)
        spec = LinkSpec(**{k: entry[k] for k in ("a", "b", "segment", "latency_us", "loss_prob")
                           if k in entry})
        if spec.a not in seen or spec.b not in seen:
            problems.append(f"{where}: endpoints must name components")
        if not 0.0 <= spec.loss_prob <= 1.0:
            problems.append(f"{where}.loss_prob: outside [0,1]")
        if spec.latency_us < 0:
            problems.append(f"{where}.latency_us: negative")
        cfg.links.append(spec)

    for i, entry in enumerate(raw.get("noise", [])):
        where = f"noise[{i}]"
        _take(entry, {"src", "dst", "rate_per_s", "payload_len", "dst_port"}, where, warnings)
        spec = NoiseSpec(
            src=entry.get("src", cfg.hmi.id),
            dst=entry.get("dst", ""),
            rate_per_s=float(entry.get("rate_per_s", 2.0)),
            payload_len=int(entry.get("payload_len", 64)),
            dst_port=int(entry.get("dst_port", 9999)),
        )
        if spec.src not in seen:
            problems.append(f"{where}.src: {spec.src!r} does not name a component")
        if spec.dst not in seen:
            problems.append(f"{where}.dst: {spec.dst!r} does not name a component")
        if spec.rate_per_s <= 0:
            problems.append(f"{where}.rate_per_s: must be > 0")
        if spec.payload_len < 1:
            problems.append(f"{where}.payload_len: must be >= 1")
        cfg.noise.append(spec)

    for i, entry in enumerate(raw.get("goals", [])):
        where = f"goals[{i}]"
        _take(entry, {"kind", "target", "viewer", "params"}, where, warnings)
        spec = GoalSpec(
            kind=entry.get("kind", ""),
            target=entry.get("target", ""),
            viewer=entry.get("viewer", cfg.hmi.id),
            params=dict(entry.get("params", {})),
        )
        if spec.kind not in GOAL_KINDS:
            problems.append(f"{where}.kind: {spec.kind!r} is not one of {', '.join(GOAL_KINDS)}")
        if not spec.target:
            problems.append(f"{where}.target: missing required field")
        cfg.goals.append(spec)

    cfg.outputs = dict(raw.get("outputs", {"dir": "out"}))
    cfg.gateway = dict(raw.get("gateway", {"bind": "127.0.0.1:8700"}))
    cfg.attack_defaults = dict(raw.get("attack_defaults", {}))
    cfg.warnings = warnings
    for w in warnings:
        log.warning("%s", w)
    if problems:
        raise ValidationError(problems)
    return cfg


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Service:
    protocol: str
    port: int
    readable: dict
    writable: dict


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    address: str
    segments: tuple
    services: tuple


@dataclass
class TopologyGraph:
    nodes: list
    links: list
    segments: dict  # segment -> ordered node ids

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def field_links(self):
        return [l for l in self.links if l.segment.startswith("field.")]


def _plant_services(spec: PlantSpec) -> tuple:
    regs = spec.registers
    return (Service(
        protocol="modbus", port=MODBUS_PORT,
        readable={"input": [0, regs["input"]], "holding": [0, regs["holding"]],
                  "coils": [0, regs["coils"]], "discrete_inputs": [0, regs["discrete_inputs"]]},
        writable={"coils": [0, 1], "holding": [0, regs["holding"]]},
    ),)


def _plc_services() -> tuple:
    return (Service(
        protocol="modbus", port=MODBUS_PORT,
        readable={"input": [0, 2], "holding": [0, 2], "discrete_inputs": [0, 1]},
        writable={"holding": [0, 2]},
    ),)


def _hmi_services(cfg: ScenarioConfig) -> tuple:
    # The supervisory web surface: a reachable target for recon/DoS even
    # though nothing answers Modbus there.
    bind = cfg.gateway.get("bind", "127.0.0.1:8700")
    port = int(bind.rsplit(":", 1)[1]) if ":" in bind else 8700
    return (Service(protocol="http", port=port, readable={}, writable={}),)


def build_topology(cfg: ScenarioConfig) -> TopologyGraph:
    """Auto-wire the two-tier network: one field segment per plant/PLC pair,
    one control segment joining PLCs, HMI and (by default) the attacker.

    Segment peers are fully meshed with point-to-point links, so any two
    nodes sharing a segment have a direct route; hosts never forward, so
    nothing is reachable across segments. Address assignment is a pure
    function of the config: 10.0.<segment ordinal>.<host ordinal>.
    """
    plc_by_plant = {}
    for plc_spec in cfg.plcs:
        plc_by_plant.setdefault(plc_spec.plant_ref, []).append(plc_spec.id)

    segments: dict[str, list] = {"control": []}
    for plant_spec in cfg.plants:
        seg = f"field.{plant_spec.id}"
        segments[seg] = [plant_spec.id] + plc_by_plant.get(plant_spec.id, [])
    segments["control"] = [p.id for p in cfg.plcs] + [cfg.hmi.id]

    attacker_segment = cfg.attacker.segment
    if attacker_segment == "isolated":
        segments["isolated"] = [cfg.attacker.id]
    else:
        segments[attacker_segment].append(cfg.attacker.id)

    segment_ordinal = {seg: i + 1 for i, seg in enumerate(segments)}

    home_segment = {}
    for plant_spec in cfg.plants:
        home_segment[plant_spec.id] = f"field.{plant_spec.id}"
    for plc_spec in cfg.plcs:
        home_segment[plc_spec.id] = "control"
    home_segment[cfg.hmi.id] = "control"
    home_segment[cfg.attacker.id] = ("isolated" if attacker_segment == "isolated"
                                     else attacker_segment)

    addresses = {}
    host_counter = {seg: 0 for seg in segments}
    ordered_ids = ([p.id for p in cfg.plants] + [p.id for p in cfg.plcs]
                   + [cfg.hmi.id, cfg.attacker.id])
    for node_id in ordered_ids:
        seg = home_segment[node_id]
        host_counter[seg] += 1
        if host_counter[seg] > MAX_HOSTS_PER_SEGMENT:
            raise CapacityError(f"segment {seg!r} exceeds {MAX_HOSTS_PER_SEGMENT} hosts")
        addresses[node_id] = f"10.0.{segment_ordinal[seg]}.{host_counter[seg]}"

    node_segments = {nid: [] for nid in ordered_ids}
    for seg, members in segments.items():
        for nid in members:
            node_segments[nid].append(seg)

    nodes = []
    for plant_spec in cfg.plants:
        nodes.append(Node(plant_spec.id, KIND_PLANT, addresses[plant_spec.id],
                          tuple(node_segments[plant_spec.id]), _plant_services(plant_spec)))
    for plc_spec in cfg.plcs:
        nodes.append(Node(plc_spec.id, KIND_PLC, addresses[plc_spec.id],
                          tuple(node_segments[plc_spec.id]), _plc_services()))
    nodes.append(Node(cfg.hmi.id, KIND_HMI, addresses[cfg.hmi.id],
                      tuple(node_segments[cfg.hmi.id]), _hmi_services(cfg)))
    nodes.append(Node(cfg.attacker.id, KIND_ATTACKER, addresses[cfg.attacker.id],
                      tuple(node_segments[cfg.attacker.id]), ()))

    links = []
    if cfg.links:
        for i, spec in enumerate(cfg.links):
            seg = spec.segment or home_segment[spec.b]
            links.append(Link(f"link.{spec.a}--{spec.b}", spec.a, spec.b,
                              round(spec.latency_us * 1000), spec.loss_prob, seg))
    else:
        for seg, members in segments.items():
            for i, a in enumerate(members):
                for b in members[i + 1:]:
                    links.append(Link(f"link.{a}--{b}", a, b,
                                      DEFAULT_LATENCY_NS, 0.0, seg))

    return TopologyGraph(nodes=nodes, links=links, segments=segments)


# ---------------------------------------------------------------------------
# per-component configs
# ---------------------------------------------------------------------------

def emit_configs(topology: TopologyGraph, cfg: ScenarioConfig) -> list:
    """One serializable record per node, derived solely from config + graph."""
    plant_specs = {p.id: p for p in cfg.plants}
    plc_specs = {p.id: p for p in cfg.plcs}
    records = []
    for node in topology.nodes:
        record = {
            "id": node.id,
            "kind": node.kind,
            "address": node.address,
            "segments": list(node.segments),
        }
        if node.kind == KIND_PLANT:
            spec = plant_specs[node.id]
            record["params"] = asdict(spec.params)
            record["registers"] = dict(spec.registers)
            record["service"] = asdict(spec.service)
            record["model"] = spec.model
        elif node.kind == KIND_PLC:
            spec = plc_specs[node.id]
            record["plant"] = {"id": spec.plant_ref,
                               "address": topology.node(spec.plant_ref).address}
            record["setpoints"] = {"p_set": spec.setpoints.p_set, "t_set": spec.setpoints.t_set}
            record["scan"] = asdict(spec.scan)
            record["service"] = asdict(spec.service)
        elif node.kind == KIND_HMI:
            record["poll_period_s"] = cfg.hmi.poll_period_s
            record["limits"] = dict(cfg.hmi.limits)
            record["plcs"] = [
                {"id": p.id, "address": topology.node(p.id).address,
                 "tags": {f"{p.id}.pressure": {"bank": "input", "addr": 0, "scale": 0.1,
                                               "units": "kPa"},
                          f"{p.id}.temperature": {"bank": "input", "addr": 1, "scale": 0.1,
                                                  "units": "K"},
                          f"{p.id}.p_set": {"bank": "holding", "addr": 0, "scale": 0.1,
                                            "units": "kPa"},
                          f"{p.id}.t_set": {"bank": "holding", "addr": 1, "scale": 0.1,
                                            "units": "K"},
                          f"{p.id}.heater": {"bank": "discrete_inputs", "addr": 0,
                                             "scale": 1, "units": "bool"}}}
                for p in cfg.plcs
            ]
        elif node.kind == KIND_ATTACKER:
            record["segment"] = cfg.attacker.segment
        records.append(record)
    return records


# ---------------------------------------------------------------------------
# attack view
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TagInfo:
    name: str
    server: str       # node id
    service: str      # "<node>:<port>"
    bank: str
    addr: int
    viewer: str       # node id whose reads show this tag
    link_id: str      # link carrying server->viewer reads
    writable: bool


@dataclass(frozen=True)
class FlowInfo:
    name: str
    src: str
    dst: str
    dst_port: int
    link_id: str


@dataclass
class AttackView:
    """Exactly the facts the planner needs: target nodes, their services and
    writable ranges, segment attachment, links, tags and conversations.
    No plant physics internals cross this boundary."""
    attacker: str
    attacker_segments: tuple
    nodes: list          # target nodes only (the attacker is not a target)
    links: list
    segments: dict
    services: dict       # service id -> {node, port, writable ranges}
    tags: dict           # tag name -> TagInfo
    flows: dict          # flow name -> FlowInfo


def export_attack_view(topology: TopologyGraph, cfg: ScenarioConfig) -> AttackView:
    attacker = cfg.attacker.id
    targets = [n for n in topology.nodes if n.id != attacker]

    services = {}
    for node in targets:
        for svc in node.services:
            services[f"{node.id}:{svc.port}"] = {
                "node": node.id,
                "port": svc.port,
                "protocol": svc.protocol,
                "writable": dict(svc.writable),
            }

    def link_between(a: str, b: str):
        for l in topology.links:
            if {l.a, l.b} == {a, b}:
                return l.id
        return ""

    tags = {}
    flows = {}
    for plc_spec in cfg.plcs:
        plc_id = plc_spec.id
        plant_id = plc_spec.plant_ref
        hmi_id = cfg.hmi.id
        plc_hmi_link = link_between(plc_id, hmi_id)
        plc_plant_link = link_between(plc_id, plant_id)
        plc_svc = f"{plc_id}:{MODBUS_PORT}"
        plant_svc = f"{plant_id}:{MODBUS_PORT}"
        tags[f"{plc_id}.pressure"] = TagInfo(f"{plc_id}.pressure", plc_id, plc_svc,
                                             "input", 0, hmi_id, plc_hmi_link, False)
        tags[f"{plc_id}.temperature"] = TagInfo(f"{plc_id}.temperature", plc_id, plc_svc,
                                                "input", 1, hmi_id, plc_hmi_link, False)
        tags[f"{plc_id}.p_set"] = TagInfo(f"{plc_id}.p_set", plc_id, plc_svc,
                                          "holding", 0, hmi_id, plc_hmi_link, True)
        tags[f"{plc_id}.t_set"] = TagInfo(f"{plc_id}.t_set", plc_id, plc_svc,
                                          "holding", 1, hmi_id, plc_hmi_link, True)
        tags[f"{plant_id}.pressure"] = TagInfo(f"{plant_id}.pressure", plant_id, plant_svc,
                                               "input", 0, plc_id, plc_plant_link, False)
        tags[f"{plant_id}.temperature"] = TagInfo(f"{plant_id}.temperature", plant_id,
                                                  plant_svc, "input", 1, plc_id,
                                                  plc_plant_link, False)
        tags[f"{plant_id}.heater"] = TagInfo(f"{plant_id}.heater", plant_id, plant_svc,
                                             "coils", 0, plc_id, plc_plant_link, True)
        flows[f"{hmi_id}->{plc_id}"] = FlowInfo(f"{hmi_id}->{plc_id}", hmi_id, plc_id,
                                                MODBUS_PORT, plc_hmi_link)
        flows[f"{plc_id}->{plant_id}"] = FlowInfo(f"{plc_id}->{plant_id}", plc_id, plant_id,
                                                  MODBUS_PORT, plc_plant_link)

    attacker_segments = tuple(topology.node(attacker).segments)
    return AttackView(
        attacker=attacker,
        attacker_segments=attacker_segments,
        nodes=[{"id": n.id, "kind": n.kind, "address": n.address,
                "segments": list(n.segments)} for n in targets],
        links=[{"id": l.id, "a": l.a, "b": l.b, "segment": l.segment}
               for l in topology.links],
        segments={seg: list(members) for seg, members in topology.segments.items()},
        services=services,
        tags=tags,
        flows=flows,
    )
