"""Heated gas container: first-order thermal model with ideal-gas pressure.

The physical story: a sealed container of gas sits at ambient temperature;
a heater raises temperature at a fixed rate while a loss term pulls it back
toward ambient, and pressure follows from P = nRT/V at constant volume (so
halving the volume at constant temperature doubles the pressure, and
heating at constant volume raises it). Integration is explicit Euler; the
dynamics are first-order and slow, so the dt * cool_coeff < 1 guard is all
the stability it needs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from . import modbus
from .endpoint import ModbusServerEndpoint
from .errors import ConfigError
from .fabric import NS_PER_S, Fabric, ServiceQueue

log = logging.getLogger(__name__)

GAS_CONSTANT = 8.314  # J/(mol K)

UINT16_MAX = 65535

# Register map: input 0 = pressure in deci-kPa, input 1 = temperature in
# deci-K, coil 0 = heater command. Fixed-point x10 scaling keeps 0.1-unit
# resolution inside uint16.
IR_PRESSURE = 0
IR_TEMPERATURE = 1
COIL_HEATER = 0


@dataclass(frozen=True)
class PlantParams:
    n_mol: float = 1.0
    volume_m3: float = 0.1
    t_ambient_k: float = 300.0
    heat_rate_k_per_s: float = 0.5
    cool_coeff_per_s: float = 0.01
    dt_s: float = 0.1
    gas_constant: float = GAS_CONSTANT
    # Measurement jitter on the published registers only; the physical state
    # stays exact. Off by default.
    sensor_noise_t_k: float = 0.0
    sensor_noise_p_pa: float = 0.0

    def validate(self):
        problems = []
        for name in ("n_mol", "volume_m3", "heat_rate_k_per_s", "dt_s", "t_ambient_k"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        if self.cool_coeff_per_s < 0:
            problems.append("cool_coeff_per_s must be >= 0")
        if self.dt_s * self.cool_coeff_per_s >= 1.0:
            problems.append("dt_s * cool_coeff_per_s must stay below 1 (Euler stability)")
        if self.sensor_noise_t_k < 0 or self.sensor_noise_p_pa < 0:
            problems.append("sensor noise deviations must be >= 0")
        return problems


@dataclass(frozen=True)
class PlantState:
    temperature_k: float
    pressure_pa: float
    heater: bool
    t_s: float

    @classmethod
    def initial(cls, params: PlantParams) -> "PlantState":
        t0 = params.t_ambient_k
        return cls(t0, pressure_for(t0, params), False, 0.0)


def pressure_for(temperature_k: float, params: PlantParams) -> float:
    return params.n_mol * params.gas_constant * temperature_k / params.volume_m3


def step(state: PlantState, params: PlantParams) -> PlantState:
    """One explicit-Euler step; pressure is recomputed from the gas law so
    the closure P*V = n*R*T holds exactly after every step."""
    heat = params.heat_rate_k_per_s if state.heater else 0.0
    t_next = (state.temperature_k
              + params.dt_s * heat
              - params.dt_s * params.cool_coeff_per_s * (state.temperature_k - params.t_ambient_k))
    return PlantState(
        temperature_k=t_next,
        pressure_pa=pressure_for(t_next, params),
        heater=state.heater,
        t_s=state.t_s + params.dt_s,
    )


def _round_half_away(value: float) -> int:
    # Register values are non-negative; banker's rounding would be wrong here.
    return int(value + 0.5)


def publish(state: PlantState):
    """Scale state into register values: deci-kPa and deci-K.

    Returns (ir_pressure, ir_temperature, saturated_fields); values beyond
    uint16 saturate and the field name is reported so the caller can log it.
    """
    saturated = []
    raw_p = _round_half_away(state.pressure_pa / 100.0)
    raw_t = _round_half_away(state.temperature_k * 10.0)
    if raw_p > UINT16_MAX:
        raw_p = UINT16_MAX
        saturated.append("pressure")
    if raw_t > UINT16_MAX:
        raw_t = UINT16_MAX
        saturated.append("temperature")
    return raw_p, raw_t, saturated


def apply_actuation(bank: modbus.RegisterBank) -> bool:
    """Heater command sampled from coil 0 at a step boundary."""
    return bool(bank.coils[COIL_HEATER])


class PlantComponent:
    """Fabric-resident plant: physics timer plus a Modbus server.

    The heater coil is sampled at the start of each step, so a write landing
    mid-interval takes effect at the next step boundary.
    """

    def __init__(self, fabric: Fabric, node_id: str, params: PlantParams,
                 register_sizes: dict | None = None,
                 queue: ServiceQueue | None = None,
                 port: int = 502, log_sink=None, stop_ns: int | None = None):
        problems = params.validate()
        if problems:
            raise ConfigError(f"plant {node_id}: " + "; ".join(problems))
        sizes = {"coils": 8, "discrete_inputs": 8, "holding": 8, "input": 8}
        sizes.update(register_sizes or {})
        self.fabric = fabric
        self.node_id = node_id
        self.params = params
        self.state = PlantState.initial(params)
        self.bank = modbus.RegisterBank(
            coils=sizes["coils"], discrete_inputs=sizes["discrete_inputs"],
            holding=sizes["holding"], input_registers=sizes["input"])
        self.endpoint = ModbusServerEndpoint(fabric, node_id, self.bank, port=port,
                                             queue=queue, log_sink=log_sink)
        self.log_sink = log_sink
        self.stop_ns = stop_ns
        self.history: list[PlantState] = [self.state]
        self.active_tasks = 2  # physics timer + server
        self._dt_ns = round(params.dt_s * NS_PER_S)
        self._noise_rng = None
        if params.sensor_noise_t_k > 0 or params.sensor_noise_p_pa > 0:
            from .fabric import substream
            self._noise_rng = substream(fabric.seed, "plant-noise", node_id)
        self._publish()
        fabric.call_after(self._dt_ns, self._tick)

    def _publish(self):
        measured = self.state
        if self._noise_rng is not None:
            measured = replace(
                self.state,
                temperature_k=self.state.temperature_k
                + self._noise_rng.gauss(0.0, self.params.sensor_noise_t_k),
                pressure_pa=self.state.pressure_pa
                + self._noise_rng.gauss(0.0, self.params.sensor_noise_p_pa),
            )
        raw_p, raw_t, saturated = publish(measured)
        self.bank.input[IR_PRESSURE] = raw_p
        self.bank.input[IR_TEMPERATURE] = raw_t
        for field in saturated:
            if self.log_sink is not None:
                self.log_sink.emit(self.node_id, "warning", "register saturation",
                                   field=field, limit=UINT16_MAX)

    def _tick(self):
        heater = apply_actuation(self.bank)
        self.state = replace(self.state, heater=heater)
        self.state = step(self.state, self.params)
        self.history.append(self.state)
        self._publish()
        next_ts = self.fabric.clock + self._dt_ns
        if self.stop_ns is None or next_ts <= self.stop_ns:
            self.fabric.call_at(next_ts, self._tick)
        else:
            self.active_tasks -= 1
