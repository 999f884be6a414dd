"""Soft PLC: fixed scan cycle reading the plant, driving the heater, and
serving mirrored measurements plus HMI-writable setpoints.

Register map: holding 0-1 are the pressure/temperature setpoints (deci-kPa
and deci-K, writable by the HMI with function 0x06/0x10), input 0-1 mirror
the plant sensors, discrete input 0 is the heater command status.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import modbus
from .endpoint import ModbusClientPort, ModbusServerEndpoint
from .errors import ConfigError
from .fabric import Fabric, ServiceQueue

log = logging.getLogger(__name__)

HR_P_SET = 0
HR_T_SET = 1
IR_PRESSURE = 0
IR_TEMPERATURE = 1
DI_HEATER = 0


@dataclass(frozen=True)
class Setpoints:
    p_set: int  # deci-kPa
    t_set: int  # deci-K


@dataclass(frozen=True)
class ScanConfig:
    scan_period_ms: int = 100
    read_timeout_ms: int = 50
    deadband: int = 0  # deci-units of hysteresis below the setpoints

    def validate(self):
        problems = []
        if self.scan_period_ms <= 0:
            problems.append("scan_period_ms must be > 0")
        if not 0 < self.read_timeout_ms < self.scan_period_ms:
            problems.append("read_timeout_ms must sit inside (0, scan_period_ms)")
        if self.deadband < 0:
            problems.append("deadband must be >= 0")
        return problems


def control_law(p: int, t: int, sp: Setpoints) -> bool:
    """Heat only while both readings sit strictly below their setpoints."""
    return p < sp.p_set and t < sp.t_set


class PlcComponent:
    """One scan cycle: read plant sensors, mirror them, evaluate the control
    law against the current setpoints, write the heater coil on change.

    A read timeout freezes the mirrors (flagged stale in logs) and skips the
    coil write for that cycle, so every write is backed by a fresh read.
    """

    def __init__(self, fabric: Fabric, node_id: str, plant_id: str,
                 setpoints: Setpoints, scan: ScanConfig | None = None,
                 queue: ServiceQueue | None = None, port: int = 502,
                 log_sink=None, stop_ns: int | None = None):
        self.scan_config = scan or ScanConfig()
        problems = self.scan_config.validate()
        if problems:
            raise ConfigError(f"plc {node_id}: " + "; ".join(problems))
        self.fabric = fabric
        self.node_id = node_id
        self.plant_id = plant_id
        self.bank = modbus.RegisterBank(coils=0, discrete_inputs=1,
                                        holding=2, input_registers=2)
        self.bank.holding[HR_P_SET] = setpoints.p_set
        self.bank.holding[HR_T_SET] = setpoints.t_set
        self.endpoint = ModbusServerEndpoint(fabric, node_id, self.bank, port=port,
                                             queue=queue, log_sink=log_sink)
        self.client = ModbusClientPort(fabric, node_id, plant_id, origin=node_id,
                                       log_sink=log_sink)
        self.log_sink = log_sink
        self.stop_ns = stop_ns
        self.stale = False
        self.last_command = False
        self.last_scan_duration_ns = 0
        self.scan_count = 0
        self.stale_count = 0
        self.active_tasks = 3  # scan timer + server + client port
        self._period_ns = self.scan_config.scan_period_ms * 1_000_000
        self._timeout_ns = self.scan_config.read_timeout_ms * 1_000_000
        # First scan one period in, so the plant has published once.
        fabric.call_after(self._period_ns, self._scan)

    @property
    def setpoints(self) -> Setpoints:
        return Setpoints(self.bank.holding[HR_P_SET], self.bank.holding[HR_T_SET])

    @property
    def mirrors(self):
        return self.bank.input[IR_PRESSURE], self.bank.input[IR_TEMPERATURE]

    def _scan(self):
        started = self.fabric.clock
        self.scan_count += 1
        read = modbus.ReadRequest(modbus.READ_INPUT_REGISTERS, 0, 2)
        self.client.request(
            read, self._timeout_ns,
            on_reply=lambda adu, pending: self._on_sensors(adu, started),
            on_timeout=lambda pending: self._on_read_timeout(started),
        )
        next_ts = started + self._period_ns
        if self.stop_ns is None or next_ts <= self.stop_ns:
            self.fabric.call_at(next_ts, self._scan)
        else:
            self.active_tasks -= 1

    def _on_sensors(self, adu, started_ns: int):
        if modbus.is_exception(adu.pdu) or not isinstance(adu.pdu, modbus.ReadRegistersResponse):
            self._on_read_timeout(started_ns)
            return
        values = adu.pdu.values
        if len(values) < 2:
            self._on_read_timeout(started_ns)
            return
        self.bank.input[IR_PRESSURE] = values[0]
        self.bank.input[IR_TEMPERATURE] = values[1]
        self.stale = False
        self.last_scan_duration_ns = self.fabric.clock - started_ns
        self._actuate(values[0], values[1])

    def _on_read_timeout(self, started_ns: int):
        # Keep the last mirrors; a frozen-but-plausible decoy beats a safety
        # trip here. No coil write without a fresh read.
        self.stale = True
        self.stale_count += 1
        self.last_scan_duration_ns = self.fabric.clock - started_ns
        if self.log_sink is not None:
            self.log_sink.emit(self.node_id, "warning", "plant read failed; mirrors stale",
                               plant=self.plant_id)

    def _actuate(self, p: int, t: int):
        sp = self.setpoints
        db = self.scan_config.deadband
        if db and not self.last_command:
            # Hysteresis variant: turn-on waits for readings to drop a
            # deadband below the setpoints; turn-off uses the plain law.
            lowered = Setpoints(sp.p_set - db, sp.t_set - db)
            command = control_law(p, t, lowered)
        else:
            command = control_law(p, t, sp)
        self.bank.discrete_inputs[DI_HEATER] = command
        if command == self.last_command:
            return
        self.last_command = command
        write = modbus.coil_write(0, command)
        self.client.request(write, self._timeout_ns,
                            on_timeout=lambda pending: self._on_write_timeout(command))

    def _on_write_timeout(self, command: bool):
        if self.log_sink is not None:
            self.log_sink.emit(self.node_id, "warning", "heater command unconfirmed",
                               command=command, plant=self.plant_id)
