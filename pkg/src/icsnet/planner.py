"""Attack planning over the exported architecture view.

Ground facts describe what the attacker has or can do; actions are
precondition/effect pairs over those facts. Facts are only ever added
during planning (teardown is a scheduling matter), which keeps the forward
breadth-first search sound and cheap to verify by brute force.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

from .coordinator import AttackView
from .errors import ScheduleOverflow
from .fabric import substream

log = logging.getLogger(__name__)

RECON = "recon"
MITM = "mitm"
SPOOF = "spoof"
DIRECT_SPOOF = "direct_spoof"
REPLAY = "replay"
DOS = "dos"

DEFAULT_DWELL_S = 5.0
DEFAULT_JITTER_MAX_S = 2.0
DEFAULT_SWEEP_LEN = 16
DEFAULT_RECON_RATE = 10.0
DEFAULT_SPOOF_WINDOW_S = 30.0
DEFAULT_DOS_WINDOW_S = 10.0
DEFAULT_DOS_RATE = 100.0
DEFAULT_REPLAY_COUNT = 3
DEFAULT_REPLAY_SPACING_S = 1.0


# Facts are plain tuples: ("reachable", attacker, service), ("attached",
# attacker, segment), ("on_path", attacker, link), ("knows_map", attacker,
# service), ("writable", service, range), ("spoofed", tag, viewer),
# ("degraded", service), ("replayed", flow).


@dataclass(frozen=True)
class ActionModel:
    kind: str
    params: dict = field(default_factory=dict)
    preconditions: frozenset = frozenset()
    effects: frozenset = frozenset()

    def __post_init__(self):
        overlap = self.preconditions & self.effects
        if overlap:
            raise ValueError(f"action {self.kind} effects overlap preconditions: {overlap}")

    def name(self) -> str:
        target = self.params.get("target", "")
        return f"{self.kind}({target})"


@dataclass(frozen=True)
class PlanStep:
    action: ActionModel

    @property
    def kind(self):
        return self.action.kind

    @property
    def params(self):
        return self.action.params


@dataclass
class AttackPlan:
    plan_id: str
    goal: tuple
    steps: list


@dataclass
class NoPlan:
    goal: tuple
    frontier: frozenset  # every fact reachable from the base, for diagnosis


@dataclass
class TimedStep:
    attack_id: str
    kind: str
    params: dict
    start_s: float
    duration_s: float


@dataclass
class AttackSchedule:
    plan_id: str
    goal: tuple
    steps: list
    effects_done_s: float = 0.0


@dataclass(frozen=True)
class PlanInvalid:
    step_index: int
    reason: str


OK = "ok"


def derive_facts(view: AttackView) -> frozenset:
    """Base fact set implied by attacker placement and the service map."""
    attacker = view.attacker
    facts = set()
    for segment in view.attacker_segments:
        facts.add(("attached", attacker, segment))
    segment_peers = set()
    for segment in view.attacker_segments:
        segment_peers.update(view.segments.get(segment, []))
    segment_peers.discard(attacker)
    for service_id, svc in view.services.items():
        if svc["node"] in segment_peers:
            facts.add(("reachable", attacker, service_id))
    for service_id, svc in view.services.items():
        for bank, span in svc["writable"].items():
            facts.add(("writable", service_id, f"{bank}:{span[0]}-{span[1]}"))
    return frozenset(facts)


def ground_actions(view: AttackView) -> list:
    """Instantiate every parameterized action against the concrete view."""
    attacker = view.attacker
    actions = []
    for service_id in view.services:
        actions.append(ActionModel(
            kind=RECON,
            params={"target": service_id},
            preconditions=frozenset({("reachable", attacker, service_id)}),
            effects=frozenset({("knows_map", attacker, service_id)}),
        ))
        actions.append(ActionModel(
            kind=DOS,
            params={"target": service_id},
            preconditions=frozenset({("reachable", attacker, service_id)}),
            effects=frozenset({("degraded", service_id)}),
        ))
    for link in view.links:
        actions.append(ActionModel(
            kind=MITM,
            params={"target": link["id"], "link": link["id"]},
            preconditions=frozenset({("attached", attacker, link["segment"])}),
            effects=frozenset({("on_path", attacker, link["id"])}),
        ))
    for tag in view.tags.values():
        actions.append(ActionModel(
            kind=SPOOF,
            params={"target": tag.name, "tag": tag.name, "link": tag.link_id,
                    "service": tag.service, "viewer": tag.viewer},
            preconditions=frozenset({
                ("on_path", attacker, tag.link_id),
                ("knows_map", attacker, tag.service),
            }),
            effects=frozenset({("spoofed", tag.name, tag.viewer)}),
        ))
        if tag.writable:
            span = view.services[tag.service]["writable"][tag.bank]
            actions.append(ActionModel(
                kind=DIRECT_SPOOF,
                params={"target": tag.name, "tag": tag.name, "service": tag.service,
                        "viewer": tag.viewer},
                preconditions=frozenset({
                    ("reachable", attacker, tag.service),
                    ("writable", tag.service, f"{tag.bank}:{span[0]}-{span[1]}"),
                    ("knows_map", attacker, tag.service),
                }),
                effects=frozenset({("spoofed", tag.name, tag.viewer)}),
            ))
    for flow in view.flows.values():
        actions.append(ActionModel(
            kind=REPLAY,
            params={"target": flow.name, "flow": flow.name, "link": flow.link_id},
            preconditions=frozenset({("on_path", attacker, flow.link_id)}),
            effects=frozenset({("replayed", flow.name)}),
        ))
    return actions


def goal_fact(view: AttackView, kind: str, target: str, viewer: str = "") -> tuple:
    """Translate a scenario goal entry into a ground fact."""
    attacker = view.attacker
    if kind == "knows_map":
        service = target if ":" in target else f"{target}:502"
        return ("knows_map", attacker, service)
    if kind == "on_path":
        return ("on_path", attacker, target)
    if kind == "spoofed":
        tag = view.tags.get(target)
        return ("spoofed", target, viewer or (tag.viewer if tag else ""))
    if kind == "degraded":
        service = target if ":" in target else f"{target}:502"
        return ("degraded", service)
    if kind == "replayed":
        return ("replayed", target)
    raise ValueError(f"unknown goal kind {kind!r}")


def plan(goal: tuple, facts: frozenset, actions: list, seed: int):
    """Shortest action sequence reaching the goal, by forward BFS over fact
    sets. Ties between equally short plans break on a seeded shuffle of the
    expansion order, which is where attack diversity comes from.

    Fact sets are packed into bitmasks; monotone effects keep the lattice
    finite and the no-op prune (skip actions adding nothing) safe.
    """
    if goal in facts:
        return AttackPlan(plan_id="", goal=goal, steps=[])
    rng = substream(seed, "planner", *goal)
    order = list(actions)
    rng.shuffle(order)

    bits: dict[tuple, int] = {}

    def bit(fact: tuple) -> int:
        if fact not in bits:
            bits[fact] = 1 << len(bits)
        return bits[fact]

    packed = []
    for action in order:
        pre = 0
        for f in action.preconditions:
            pre |= bit(f)
        eff = 0
        for f in action.effects:
            eff |= bit(f)
        packed.append((pre, eff, action))
    goal_bit = bit(goal)
    start = 0
    for f in facts:
        start |= bit(f)

    # Saturate first: with add-only effects the closure is exact
    # reachability, so an unreachable goal never pays for the BFS and the
    # closure doubles as the NoPlan diagnosis.
    closure = start
    changed = True
    while changed:
        changed = False
        for pre, eff, _ in packed:
            if closure & pre == pre and eff & ~closure:
                closure |= eff
                changed = True
    if not closure & goal_bit:
        frontier = frozenset(f for f, b in bits.items() if closure & b)
        return NoPlan(goal=goal, frontier=frontier)

    parents: dict[int, tuple] = {start: None}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        for pre, eff, action in packed:
            if state & pre != pre or not eff & ~state:
                continue
            nxt = state | eff
            if nxt in parents:
                continue
            parents[nxt] = (state, action)
            if nxt & goal_bit:
                steps = []
                cursor = nxt
                while parents[cursor] is not None:
                    prev, act = parents[cursor]
                    steps.append(PlanStep(act))
                    cursor = prev
                steps.reverse()
                return AttackPlan(plan_id="", goal=goal, steps=steps)
            queue.append(nxt)

    reached = 0
    for state in parents:
        reached |= state
    frontier = frozenset(f for f, b in bits.items() if reached & b)
    return NoPlan(goal=goal, frontier=frontier)


def validate(attack_plan: AttackPlan, facts: frozenset):
    """Replay precondition/effect semantics; report the first broken step."""
    state = set(facts)
    for i, step in enumerate(attack_plan.steps):
        missing = step.action.preconditions - state
        if missing:
            return PlanInvalid(i, f"missing facts {sorted(missing)}")
        state |= step.action.effects
    if attack_plan.goal not in state:
        return PlanInvalid(len(attack_plan.steps), "goal not established by final step")
    return OK


def _pick(overrides: dict, *keys, default):
    for key in keys:
        if key in overrides:
            return overrides[key]
    return default


def _step_defaults(kind: str, params: dict, overrides: dict) -> dict:
    """Merge grounded action params with per-goal overrides and per-kind
    defaults. Plain keys (window_s, offset, ...) come from the goal entry;
    prefixed keys (dos_window_s, ...) from scenario-wide attack defaults."""
    merged = dict(params)
    if kind == RECON:
        merged.setdefault("sweep_len", _pick(overrides, "sweep_len",
                                             default=DEFAULT_SWEEP_LEN))
        merged.setdefault("rate_per_s", _pick(overrides, "recon_rate_per_s",
                                              default=DEFAULT_RECON_RATE))
    elif kind in (SPOOF, DIRECT_SPOOF):
        merged.setdefault("offset", _pick(overrides, "offset", "spoof_offset", default=500))
        if "absolute" in overrides:
            merged.setdefault("absolute", overrides["absolute"])
        merged.setdefault("window_s", _pick(overrides, "window_s", "spoof_window_s",
                                            default=DEFAULT_SPOOF_WINDOW_S))
        merged.setdefault("mode", "rewrite" if kind == SPOOF else "direct_write")
    elif kind == DOS:
        merged.setdefault("rate_per_s", _pick(overrides, "rate_per_s", "dos_rate_per_s",
                                              default=DEFAULT_DOS_RATE))
        merged.setdefault("window_s", _pick(overrides, "window_s", "dos_window_s",
                                            default=DEFAULT_DOS_WINDOW_S))
    elif kind == REPLAY:
        merged.setdefault("count", _pick(overrides, "count", "replay_count",
                                         default=DEFAULT_REPLAY_COUNT))
        merged.setdefault("spacing_s", _pick(overrides, "spacing_s", "replay_spacing_s",
                                             default=DEFAULT_REPLAY_SPACING_S))
        merged.setdefault("refresh_tid", _pick(overrides, "refresh_tid", default=True))
    return merged


def _durations(kind: str, params: dict, start_s: float, scenario_end_s: float):
    """(duration, effect_delay, minimum window that must fit before the end)."""
    if kind == RECON:
        sweep = 2 * params["sweep_len"] / params["rate_per_s"]
        return sweep, sweep, sweep
    if kind == MITM:
        return max(scenario_end_s - start_s, 0.0), 0.0, 0.0
    if kind in (SPOOF, DIRECT_SPOOF, DOS):
        return params["window_s"], params["window_s"], params["window_s"]
    if kind == REPLAY:
        window = params["count"] * params["spacing_s"]
        return window, window, window
    raise ValueError(f"unknown step kind {kind!r}")


def schedule(attack_plan: AttackPlan, duration_s: float, seed: int,
             overrides: dict | None = None,
             dwell_s: float = DEFAULT_DWELL_S,
             jitter_max_s: float = DEFAULT_JITTER_MAX_S,
             start_cursor_s: float = 0.0) -> AttackSchedule:
    """Assign start offsets: each step begins a dwell (plus seeded jitter)
    after the previous step's effects are established. start_cursor_s lets
    later plans queue behind the effects an earlier plan establishes."""
    overrides = overrides or {}
    rng = substream(seed, "schedule", attack_plan.plan_id, *attack_plan.goal)
    steps = []
    cursor = start_cursor_s  # time the previous step's effects are established
    for i, step in enumerate(attack_plan.steps):
        params = _step_defaults(step.kind, step.params, overrides)
        jitter = rng.uniform(0.0, jitter_max_s) if jitter_max_s > 0 else 0.0
        start = cursor + dwell_s + jitter
        duration, effect_delay, min_window = _durations(step.kind, params, start, duration_s)
        if start + min_window > duration_s:
            raise ScheduleOverflow(
                f"step {i} ({step.kind}) needs [{start:.1f}, {start + min_window:.1f}]s "
                f"but the scenario ends at {duration_s:.1f}s")
        steps.append(TimedStep(
            attack_id=f"{attack_plan.plan_id}.s{i}",
            kind=step.kind,
            params=params,
            start_s=start,
            duration_s=duration,
        ))
        cursor = start + effect_delay
    sched = AttackSchedule(plan_id=attack_plan.plan_id, goal=attack_plan.goal, steps=steps)
    sched.effects_done_s = cursor
    return sched


def plan_goals(view: AttackView, goals: list, seed: int, duration_s: float,
               overrides: dict | None = None):
    """Plan and schedule every configured goal. Returns (schedules, failures)
    where failures carry NoPlan diagnoses in goal order.

    Goals are coordinated, not independent: each plan runs against the fact
    base its predecessors establish (a MITM set up for goal one is reused by
    goal two, never doubled up), and each schedule queues behind the time
    those earlier effects land.
    """
    facts = derive_facts(view)
    actions = ground_actions(view)
    schedules = []
    failures = []
    cursor_s = 0.0
    for idx, goal_spec in enumerate(goals):
        goal = goal_fact(view, goal_spec.kind, goal_spec.target, goal_spec.viewer)
        result = plan(goal, facts, actions, seed)
        if isinstance(result, NoPlan):
            failures.append(result)
            continue
        result.plan_id = f"g{idx}"
        check = validate(result, facts)
        if check is not OK:
            raise AssertionError(f"planner produced an invalid plan: {check}")
        merged = dict(overrides or {})
        merged.update(goal_spec.params)
        sched = schedule(
            result, duration_s, seed, merged,
            dwell_s=float(merged.get("dwell_s", DEFAULT_DWELL_S)),
            jitter_max_s=float(merged.get("jitter_max_s", DEFAULT_JITTER_MAX_S)),
            start_cursor_s=cursor_s)
        schedules.append(sched)
        for step in result.steps:
            facts = frozenset(facts | step.action.effects)
        cursor_s = max(cursor_s, sched.effects_done_s)
    return schedules, failures


def plan_to_dict(sched: AttackSchedule) -> dict:
    return {
        "plan_id": sched.plan_id,
        "goal": list(sched.goal),
        "steps": [
            {"attack_id": s.attack_id, "kind": s.kind, "params": dict(s.params),
             "start_s": s.start_s, "duration_s": s.duration_s}
            for s in sched.steps
        ],
    }
