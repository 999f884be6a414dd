"""HMI polling component: the benign supervisory traffic baseline.

Polls every PLC's input registers, holding registers and heater status each
poll period, keeping an engineering-unit tag snapshot that the gateway (in
paced mode) serves to operators. Register values scale by 0.1 per the fixed
register map (deci-kPa / deci-K).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import modbus
from .endpoint import ModbusClientPort
from .fabric import NS_PER_S, Fabric

log = logging.getLogger(__name__)

KIND_MEASUREMENT = "measurement"
KIND_SETPOINT = "setpoint"
KIND_STATUS = "status"


@dataclass
class Tag:
    name: str
    component_id: str
    kind: str
    value: object
    units: str
    ts_ns: int
    stale: bool = False


class HmiPoller:
    """One Modbus client per PLC; three reads per PLC per poll period."""

    def __init__(self, fabric: Fabric, node_id: str, plc_ids: list,
                 poll_period_s: float = 1.0, read_timeout_s: float = 0.5,
                 log_sink=None, stop_ns: int | None = None):
        self.fabric = fabric
        self.node_id = node_id
        self.plc_ids = list(plc_ids)
        self.log_sink = log_sink
        self.stop_ns = stop_ns
        self.poll_period_ns = round(poll_period_s * NS_PER_S)
        self.read_timeout_ns = round(read_timeout_s * NS_PER_S)
        self.clients = {plc: ModbusClientPort(fabric, node_id, plc, origin=node_id,
                                              log_sink=log_sink)
                        for plc in self.plc_ids}
        self.tags: dict[str, Tag] = {}
        for plc in self.plc_ids:
            for name, kind, units, value in (
                    (f"{plc}.pressure", KIND_MEASUREMENT, "kPa", None),
                    (f"{plc}.temperature", KIND_MEASUREMENT, "K", None),
                    (f"{plc}.p_set", KIND_SETPOINT, "kPa", None),
                    (f"{plc}.t_set", KIND_SETPOINT, "K", None),
                    (f"{plc}.heater", KIND_STATUS, "bool", None)):
                self.tags[name] = Tag(name, plc, kind, value, units, 0, stale=True)
        self.poll_count = 0
        self.active_tasks = 1 + len(self.clients)
        self.tag_history: list = []
        fabric.call_after(self.poll_period_ns, self._poll)

    def snapshot(self) -> dict:
        return {name: Tag(t.name, t.component_id, t.kind, t.value, t.units,
                          t.ts_ns, t.stale)
                for name, t in self.tags.items()}

    def _poll(self):
        self.poll_count += 1
        for plc in self.plc_ids:
            client = self.clients[plc]
            client.request(
                modbus.ReadRequest(modbus.READ_INPUT_REGISTERS, 0, 2),
                self.read_timeout_ns,
                on_reply=lambda adu, _p, plc=plc: self._on_measurements(plc, adu),
                on_timeout=lambda _p, plc=plc: self._mark_stale(
                    plc, f"{plc}.pressure", f"{plc}.temperature"),
            )
            client.request(
                modbus.ReadRequest(modbus.READ_HOLDING_REGISTERS, 0, 2),
                self.read_timeout_ns,
                on_reply=lambda adu, _p, plc=plc: self._on_setpoints(plc, adu),
                on_timeout=lambda _p, plc=plc: self._mark_stale(
                    plc, f"{plc}.p_set", f"{plc}.t_set"),
            )
            client.request(
                modbus.ReadRequest(modbus.READ_DISCRETE_INPUTS, 0, 1),
                self.read_timeout_ns,
                on_reply=lambda adu, _p, plc=plc: self._on_status(plc, adu),
                on_timeout=lambda _p, plc=plc: self._mark_stale(plc, f"{plc}.heater"),
            )
        next_ts = self.fabric.clock + self.poll_period_ns
        if self.stop_ns is None or next_ts <= self.stop_ns:
            self.fabric.call_at(next_ts, self._poll)
        else:
            self.active_tasks -= 1

    def _set(self, name: str, value):
        tag = self.tags[name]
        tag.value = value
        tag.ts_ns = self.fabric.clock
        tag.stale = False

    def _mark_stale(self, plc: str, *names):
        for name in names:
            self.tags[name].stale = True
        if self.log_sink is not None:
            self.log_sink.emit(self.node_id, "warning", "plc poll timed out", plc=plc)

    def _on_measurements(self, plc: str, adu):
        if modbus.is_exception(adu.pdu) or not isinstance(adu.pdu, modbus.ReadRegistersResponse):
            self._mark_stale(plc, f"{plc}.pressure", f"{plc}.temperature")
            return
        values = adu.pdu.values
        self._set(f"{plc}.pressure", values[0] / 10.0)
        self._set(f"{plc}.temperature", values[1] / 10.0)
        self.tag_history.append((self.fabric.clock, f"{plc}.pressure", values[0] / 10.0))
        self.tag_history.append((self.fabric.clock, f"{plc}.temperature", values[1] / 10.0))

    def _on_setpoints(self, plc: str, adu):
        if modbus.is_exception(adu.pdu) or not isinstance(adu.pdu, modbus.ReadRegistersResponse):
            self._mark_stale(plc, f"{plc}.p_set", f"{plc}.t_set")
            return
        values = adu.pdu.values
        self._set(f"{plc}.p_set", values[0] / 10.0)
        self._set(f"{plc}.t_set", values[1] / 10.0)

    def _on_status(self, plc: str, adu):
        if modbus.is_exception(adu.pdu) or not isinstance(adu.pdu, modbus.ReadBitsResponse):
            self._mark_stale(plc, f"{plc}.heater")
            return
        self._set(f"{plc}.heater", bool(adu.pdu.bits[0]))

    def write_setpoint(self, plc: str, address: int, register_value: int,
                       on_reply=None, on_timeout=None) -> int:
        """Operator setpoint write, used by the gateway bridge. Returns the
        frame id of the write request."""
        return self.clients[plc].request(
            modbus.WriteSingleRegister(address, register_value),
            self.read_timeout_ns, on_reply=on_reply, on_timeout=on_timeout)
