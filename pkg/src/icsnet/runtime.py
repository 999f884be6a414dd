"""End-to-end run orchestration: setup, planning, simulation, attack
execution, collection, artifact emission and verification.

Stage order is fixed: parse -> topology -> configs -> attack view -> plans
-> fabric -> components -> taps -> simulate -> label -> write -> manifest.
A failing stage raises StageError and the partially written output
directory is removed.
"""

from __future__ import annotations

import json
import logging
import shutil
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import attacks, capture, coordinator, planner
from .coordinator import ScenarioConfig, TopologyGraph
from .errors import ConfigError, IcsnetError, IntegrityError, StageError, Unreachable
from .fabric import NS_PER_S, Fabric, ServiceQueue, create_fabric, substream
from .hmi import HmiPoller
from .plant import PlantComponent
from .plc import PlcComponent
from .planner import plan_to_dict

log = logging.getLogger(__name__)

DRAIN_NS = 3 * NS_PER_S  # post-run settling so in-flight frames land on taps
PACED_QUANTUM_NS = 10_000_000

OUTPUT_FILES = ("plan.json", "attacks.jsonl", "dataset.jsonl", "metrics.jsonl",
                "logs.jsonl", "capture.pcap", "manifest.json")


class NoiseSender:
    """Periodic filler traffic between two components; payload bytes come
    from a per-entry seeded stream so runs stay reproducible."""

    def __init__(self, fabric: Fabric, index: int, spec, seed: int,
                 stop_ns: int):
        self.fabric = fabric
        self.spec = spec
        self.origin = f"noise:{index}"
        self.stop_ns = stop_ns
        self.rng = substream(seed, "noise", index)
        self.period_ns = round(NS_PER_S / spec.rate_per_s)
        self.sent = 0
        try:
            self.flow = fabric.open_flow(spec.src, spec.dst, spec.dst_port)
        except Unreachable as exc:
            raise ConfigError(f"noise entry {index}: {exc}") from exc
        fabric.call_after(self.period_ns, self._tick)

    def _tick(self):
        payload = bytes(self.rng.randrange(256) for _ in range(self.spec.payload_len))
        self.fabric.send(self.flow, payload, self.origin)
        self.sent += 1
        next_ts = self.fabric.clock + self.period_ns
        if next_ts <= self.stop_ns:
            self.fabric.call_at(next_ts, self._tick)


@dataclass
class Simulation:
    cfg: ScenarioConfig
    topology: TopologyGraph
    view: object
    fabric: Fabric
    plants: dict
    plcs: dict
    poller: HmiPoller
    noise: list
    store: capture.CaptureStore
    metrics: capture.MetricsCollector
    log_sink: capture.LogSink
    schedules: list
    attack_events: list
    attacker_runtime: object
    component_records: list
    end_ns: int
    published_snapshot: dict = field(default_factory=dict)
    wall_clock_offset_s: float | None = None

    @property
    def components(self) -> dict:
        out = {}
        out.update(self.plants)
        out.update(self.plcs)
        out[self.poller.node_id] = self.poller
        out[self.cfg.attacker.id] = None
        return out


def build_simulation(cfg: ScenarioConfig) -> Simulation:
    """Stages topology/configs/plan/fabric/components; no events run yet."""
    try:
        log.info("stage topology: building graph and component configs")
        topology = coordinator.build_topology(cfg)
        component_records = coordinator.emit_configs(topology, cfg)
        view = coordinator.export_attack_view(topology, cfg)
    except IcsnetError:
        raise
    except Exception as exc:
        raise StageError("topology", exc) from exc

    try:
        log.info("stage plan: %d goal(s)", len(cfg.goals))
        schedules, failures = planner.plan_goals(view, cfg.goals, cfg.seed,
                                                 cfg.duration_s, cfg.attack_defaults)
        if failures:
            details = "; ".join(
                f"goal {list(f.goal)} unreachable (frontier {len(f.frontier)} facts)"
                for f in failures)
            raise StageError("plan", details)
    except IcsnetError:
        raise
    except Exception as exc:
        raise StageError("plan", exc) from exc

    try:
        log.info("stage fabric: instantiating components and taps")
        fabric = create_fabric(topology, cfg.seed)
        end_ns = round(cfg.duration_s * NS_PER_S)
        log_sink = capture.LogSink(fabric)
        store = capture.CaptureStore(fabric)

        plants = {}
        for spec in cfg.plants:
            queue = ServiceQueue(spec.service.capacity, spec.service.service_rate,
                                 spec.service.busy_reply)
            plants[spec.id] = PlantComponent(
                fabric, spec.id, spec.params, spec.registers, queue,
                log_sink=log_sink, stop_ns=end_ns)
        plcs = {}
        for spec in cfg.plcs:
            queue = ServiceQueue(spec.service.capacity, spec.service.service_rate,
                                 spec.service.busy_reply)
            plcs[spec.id] = PlcComponent(
                fabric, spec.id, spec.plant_ref, spec.setpoints, spec.scan,
                queue, log_sink=log_sink, stop_ns=end_ns)
        poller = HmiPoller(fabric, cfg.hmi.id, [p.id for p in cfg.plcs],
                           cfg.hmi.poll_period_s, cfg.hmi.read_timeout_s,
                           log_sink=log_sink, stop_ns=end_ns)
        noise = [NoiseSender(fabric, i, spec, cfg.seed, end_ns)
                 for i, spec in enumerate(cfg.noise)]

        attack_events: list = []
        attacker_runtime = attacks.launch_schedules(fabric, view, schedules,
                                                    attack_events, end_ns)
        sim = Simulation(
            cfg=cfg, topology=topology, view=view, fabric=fabric, plants=plants,
            plcs=plcs, poller=poller, noise=noise, store=store,
            metrics=None, log_sink=log_sink, schedules=schedules,
            attack_events=attack_events, attacker_runtime=attacker_runtime,
            component_records=component_records, end_ns=end_ns)
        sim.metrics = capture.MetricsCollector(fabric, sim.components, end_ns + DRAIN_NS)
        return sim
    except IcsnetError:
        raise
    except Exception as exc:
        raise StageError("fabric", exc) from exc


def execute_fast(sim: Simulation):
    try:
        log.info("stage simulate: fast run to %.1fs virtual", sim.end_ns / NS_PER_S)
        sim.fabric.run_until(sim.end_ns)
        sim.fabric.run_until(sim.end_ns + DRAIN_NS)
    except IcsnetError:
        raise
    except Exception as exc:
        raise StageError("simulate", exc) from exc


def execute_paced(sim: Simulation, quantum_ns: int = PACED_QUANTUM_NS,
                  on_quantum=None, stop_flag=None):
    """Lock virtual time to the wall clock in fixed quanta. A slow host is
    caught up without dropping events; external commands drain between
    quanta through the fabric's command queue."""
    start_wall = time.monotonic()
    sim.wall_clock_offset_s = time.time() - sim.fabric.clock / NS_PER_S
    base_clock = sim.fabric.clock
    try:
        while sim.fabric.clock < sim.end_ns:
            if stop_flag is not None and stop_flag.is_set():
                break
            target = min(sim.fabric.clock + quantum_ns, sim.end_ns)
            wall_target = start_wall + (target - base_clock) / NS_PER_S
            delay = wall_target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            sim.fabric.run_until(target)
            sim.published_snapshot = sim.poller.snapshot()
            if on_quantum is not None:
                on_quantum(sim)
        sim.fabric.run_until(sim.fabric.clock + DRAIN_NS)
    except IcsnetError:
        raise
    except Exception as exc:
        raise StageError("simulate", exc) from exc


def write_artifacts(sim: Simulation, out_dir: Path, config_bytes: bytes) -> dict:
    try:
        log.info("stage write: labeling and emitting artifacts to %s", out_dir)
        out_dir = Path(out_dir)
        configs_dir = out_dir / "configs"
        configs_dir.mkdir(parents=True, exist_ok=True)
        for record in sim.component_records:
            with open(configs_dir / f"{record['id']}.json", "w", encoding="utf-8") as fh:
                json.dump(record, fh, indent=2, sort_keys=True)
                fh.write("\n")
        with open(out_dir / "topology.json", "w", encoding="utf-8") as fh:
            json.dump(topology_to_dict(sim.topology), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out_dir / "plan.json", "w", encoding="utf-8") as fh:
            json.dump([plan_to_dict(s) for s in sim.schedules], fh, indent=2,
                      sort_keys=True)
            fh.write("\n")

        observations = sim.store.observations()
        rows = capture.label_rows(observations, sim.attack_events)
        node_ordinals = {n.id: i + 1 for i, n in enumerate(sim.topology.nodes)}

        counts = {}
        counts["attack_events"] = capture.write_jsonl(
            out_dir / "attacks.jsonl", capture.attack_events_rows(sim.attack_events))
        counts["dataset_rows"] = capture.write_jsonl(out_dir / "dataset.jsonl", rows)
        counts["metric_samples"] = capture.write_jsonl(
            out_dir / "metrics.jsonl", capture.metrics_rows(sim.metrics.samples))
        counts["log_records"] = capture.write_jsonl(
            out_dir / "logs.jsonl", capture.log_rows(sim.log_sink.records))
        counts["pcap_frames"] = capture.write_pcap(
            out_dir / "capture.pcap", observations, node_ordinals)
        counts.update({f"frames_{k}": v for k, v in sim.fabric.counters.items()})

        manifest = capture.write_manifest(
            out_dir / "manifest.json",
            config_bytes=config_bytes,
            seed=sim.cfg.seed,
            mode=sim.cfg.mode,
            duration_s=sim.cfg.duration_s,
            end_clock_ns=sim.fabric.clock,
            counts=counts,
            files={
                "plan.json": out_dir / "plan.json",
                "attacks.jsonl": out_dir / "attacks.jsonl",
                "dataset.jsonl": out_dir / "dataset.jsonl",
                "metrics.jsonl": out_dir / "metrics.jsonl",
                "logs.jsonl": out_dir / "logs.jsonl",
                "capture.pcap": out_dir / "capture.pcap",
            },
            wall_clock_offset_s=sim.wall_clock_offset_s,
        )
        return manifest
    except IcsnetError:
        raise
    except Exception as exc:
        raise StageError("write", exc) from exc


def topology_to_dict(topology: TopologyGraph) -> dict:
    return {
        "nodes": [
            {"id": n.id, "kind": n.kind, "address": n.address,
             "segments": list(n.segments),
             "services": [{"protocol": s.protocol, "port": s.port,
                           "readable": s.readable, "writable": s.writable}
                          for s in n.services]}
            for n in topology.nodes
        ],
        "links": [
            {"id": l.id, "a": l.a, "b": l.b, "latency_ns": l.latency_ns,
             "loss_prob": l.loss_prob, "segment": l.segment}
            for l in topology.links
        ],
        "segments": {seg: list(members) for seg, members in topology.segments.items()},
    }


def run(scenario, out_dir, mode: str | None = None, seed: int | None = None,
        paced_driver=None) -> dict:
    """Full pipeline. scenario is a path, bytes, or dict; returns the
    manifest. paced_driver (paced mode only) is called with the built
    simulation and a callable that executes the paced loop, so a gateway can
    wrap it."""
    if isinstance(scenario, (str, Path)):
        config_bytes = Path(scenario).read_bytes()
    elif isinstance(scenario, (bytes, bytearray)):
        config_bytes = bytes(scenario)
    else:
        config_bytes = json.dumps(scenario, sort_keys=True).encode()

    cfg = coordinator.parse_scenario(config_bytes)
    if mode is not None:
        cfg.mode = mode
    if seed is not None:
        cfg.seed = seed
        config_bytes = _override_config_bytes(config_bytes, cfg)

    out_dir = Path(out_dir)
    created = not out_dir.exists()
    if out_dir.exists() and any(out_dir.iterdir()):
        raise StageError("setup", f"output directory {out_dir} is not empty")
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        sim = build_simulation(cfg)
        if cfg.mode == "paced":
            if paced_driver is not None:
                paced_driver(sim, lambda **kw: execute_paced(sim, **kw))
            else:
                execute_paced(sim)
        else:
            execute_fast(sim)
        return write_artifacts(sim, out_dir, config_bytes)
    except BaseException:
        # No partial artifact directories: we created or emptied it above.
        shutil.rmtree(out_dir, ignore_errors=True)
        if not created:
            out_dir.mkdir(parents=True, exist_ok=True)
        raise


def _override_config_bytes(config_bytes: bytes, cfg: ScenarioConfig) -> bytes:
    # Seed overrides must show up in the manifest's config hash, or two runs
    # with different --seed flags would claim the same identity.
    raw = json.loads(config_bytes.decode("utf-8"))
    raw["seed"] = cfg.seed
    return json.dumps(raw, sort_keys=True).encode()


def plan_only(scenario) -> dict:
    """CLI `plan`: exactly the plans a run would execute, without simulating."""
    if isinstance(scenario, (str, Path)):
        config_bytes = Path(scenario).read_bytes()
    else:
        config_bytes = scenario
    cfg = coordinator.parse_scenario(config_bytes)
    topology = coordinator.build_topology(cfg)
    view = coordinator.export_attack_view(topology, cfg)
    schedules, failures = planner.plan_goals(view, cfg.goals, cfg.seed,
                                             cfg.duration_s, cfg.attack_defaults)
    return {
        "plans": [plan_to_dict(s) for s in schedules],
        "unreachable": [{"goal": list(f.goal),
                         "frontier": sorted(map(list, f.frontier))}
                        for f in failures],
    }


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _count_pcap_frames(path) -> int:
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise IntegrityError("pcap global header truncated")
        count = 0
        while True:
            rec = fh.read(16)
            if not rec:
                return count
            if len(rec) < 16:
                raise IntegrityError("pcap record header truncated")
            caplen = struct.unpack("<I", rec[8:12])[0]
            body = fh.read(caplen)
            if len(body) < caplen:
                raise IntegrityError("pcap record body truncated")
            count += 1


def verify(out_dir) -> list:
    """Recheck a finished run directory. Returns a list of violation
    strings; empty means everything holds."""
    out_dir = Path(out_dir)
    failures = []
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        return [f"missing {manifest_path}"]
    manifest = json.loads(manifest_path.read_text())

    for name, recorded in manifest["digests"].items():
        path = out_dir / name
        if not path.exists():
            failures.append(f"digest: {name} missing")
            continue
        actual = capture.sha256_file(path)
        if actual != recorded:
            failures.append(f"digest: {name} changed (manifest {recorded[:12]}..., "
                            f"file {actual[:12]}...)")

    try:
        rows = _read_jsonl(out_dir / "dataset.jsonl")
    except OSError as exc:
        return failures + [f"dataset unreadable: {exc}"]

    if len(rows) != manifest["counts"]["dataset_rows"]:
        failures.append("parity: dataset row count differs from manifest")
    try:
        pcap_frames = _count_pcap_frames(out_dir / "capture.pcap")
        if pcap_frames != len(rows):
            failures.append(f"parity: pcap has {pcap_frames} frames, dataset {len(rows)} rows")
    except (OSError, IcsnetError) as exc:
        failures.append(f"parity: {exc}")

    for i, row in enumerate(rows):
        benign = row["label"] == capture.LABEL_BENIGN
        if benign != (row["attack_id"] is None):
            failures.append(f"labels: row {i} violates label/attack_id pairing")
            break

    events = _read_jsonl(out_dir / "attacks.jsonl")
    labeled = {}
    for row in rows:
        if row["label"] != capture.LABEL_BENIGN:
            labeled.setdefault(row["frame_id"], row)
    referenced = {}
    for event in events:
        for ref in event["frame_refs"]:
            referenced[ref["frame_id"]] = (event, ref)
    if set(labeled) != set(referenced):
        failures.append("labels: attack frame_refs and labeled rows disagree")
    else:
        for frame_id, row in labeled.items():
            event, ref = referenced[frame_id]
            if (row["label"], row["attack_id"], row["tamper"]) != \
                    (event["kind"], event["attack_id"], ref["tamper"]):
                failures.append(f"labels: frame {frame_id} label fields mismatch")
                break

    metrics = _read_jsonl(out_dir / "metrics.jsonl")
    if metrics:
        last_ts = max(m["ts_ns"] for m in metrics)
        final = {m["component_id"]: m for m in metrics if m["ts_ns"] == last_ts}
        total_out = sum(m["frames_out"] for m in final.values())
        if total_out != manifest["counts"]["frames_sent"]:
            failures.append(f"metrics: sum frames_out {total_out} != "
                            f"manifest frames_sent {manifest['counts']['frames_sent']}")
    return failures
