"""Modbus endpoints bound to fabric nodes.

ModbusServerEndpoint gives a node a streaming-safe Modbus/TCP server on one
port; ModbusClientPort is one client connection with transaction matching
and virtual-time timeouts. Both are plain fabric callbacks; neither spawns
anything.
"""

from __future__ import annotations

import logging

from . import modbus
from .fabric import Fabric, ServiceQueue

log = logging.getLogger(__name__)


class ModbusServerEndpoint:
    """Serve a RegisterBank over Modbus/TCP on a node port.

    Keeps one receive buffer per flow so fragmented ADUs (attacks may split
    frames) reassemble; a malformed header clears that flow's buffer, which
    is the in-fabric analogue of resetting the connection.
    """

    def __init__(self, fabric: Fabric, node_id: str, bank: modbus.RegisterBank,
                 port: int = 502, unit_id: int = 1,
                 queue: ServiceQueue | None = None, log_sink=None):
        self.fabric = fabric
        self.node_id = node_id
        self.bank = bank
        self.unit_id = unit_id
        self.log_sink = log_sink
        self._buffers: dict[int, bytes] = {}
        on_drop = self._on_queue_drop if queue is not None and queue.busy_reply else None
        fabric.set_server(node_id, port, self._on_request, queue, on_drop)

    def _on_request(self, frame, flow):
        buf = self._buffers.get(flow.flow_id, b"") + frame.payload
        while buf:
            result = modbus.decode(buf, kind="request")
            if result is modbus.INCOMPLETE:
                break
            if isinstance(result, modbus.Malformed):
                if self.log_sink is not None:
                    self.log_sink.emit(self.node_id, "warning", "malformed modbus request",
                                       reason=result.reason, flow_id=flow.flow_id)
                buf = b""
                break
            adu, consumed = result
            buf = buf[consumed:]
            response = modbus.execute(adu.pdu, adu.unit_id, self.bank)
            out = modbus.Adu(adu.transaction_id, adu.unit_id, response)
            self.fabric.reply(flow.flow_id, modbus.encode(out), self.node_id)
        self._buffers[flow.flow_id] = buf

    def _on_queue_drop(self, frame, flow):
        # Work queue full after the bytes were accepted off the wire: answer
        # SERVER BUSY so the client sees an explicit reject instead of a
        # timeout. Undecodable fragments stay silent.
        result = modbus.decode(frame.payload, kind="request")
        if result is modbus.INCOMPLETE or isinstance(result, modbus.Malformed):
            return
        adu, _ = result
        function = getattr(adu.pdu, "function", 0) or 0
        busy = modbus.ExceptionResponse(function, modbus.EXC_SERVER_BUSY)
        out = modbus.Adu(adu.transaction_id, adu.unit_id, busy)
        self.fabric.reply(flow.flow_id, modbus.encode(out), self.node_id)


class ModbusClientPort:
    """One Modbus/TCP client connection over a fabric flow.

    request() takes completion callbacks; a response after the timeout (or
    with an unknown transaction id) is counted and dropped as stray.
    """

    def __init__(self, fabric: Fabric, src: str, dst: str, origin: str,
                 dst_port: int = 502, unit_id: int = 1, log_sink=None):
        self.fabric = fabric
        self.src = src
        self.dst = dst
        self.origin = origin
        self.log_sink = log_sink
        self.state = modbus.ClientState(unit_id=unit_id)
        self._rxbuf = b""
        self.flow_id = fabric.open_flow(src, dst, dst_port, on_response=self._on_response)

    def request(self, pdu, timeout_ns: int, on_reply=None, on_timeout=None) -> int:
        """Send one request; returns the frame id. on_reply(adu, pending) or
        on_timeout(pending) fires exactly once."""
        adu = self.state.next_request(pdu, ts_ns=self.fabric.clock)
        pending = self.state.pending[adu.transaction_id]
        timer = self.fabric.call_after(timeout_ns, lambda: self._timeout(adu.transaction_id))
        pending.context = {"on_reply": on_reply, "on_timeout": on_timeout, "timer": timer}
        return self.fabric.send(self.flow_id, modbus.encode(adu), self.origin)

    def _timeout(self, tid: int):
        pending = self.state.pending.get(tid)
        if pending is None:
            return
        self.state.forget(tid)
        if self.log_sink is not None:
            self.log_sink.emit(self.src, "warning", "modbus request timed out",
                               tid=tid, peer=self.dst)
        cb = pending.context.get("on_timeout")
        if cb is not None:
            cb(pending)

    def _on_response(self, frame, flow):
        self._rxbuf += frame.payload
        while self._rxbuf:
            result = modbus.decode(self._rxbuf, kind="response")
            if result is modbus.INCOMPLETE:
                break
            if isinstance(result, modbus.Malformed):
                if self.log_sink is not None:
                    self.log_sink.emit(self.src, "warning", "malformed modbus response",
                                       reason=result.reason, peer=self.dst)
                self._rxbuf = b""
                break
            adu, consumed = result
            self._rxbuf = self._rxbuf[consumed:]
            try:
                pending = self.state.match_response(adu)
            except modbus.StrayResponse:
                if self.log_sink is not None:
                    self.log_sink.emit(self.src, "warning", "stray modbus response dropped",
                                       tid=adu.transaction_id, peer=self.dst)
                continue
            pending.context["timer"].cancel()
            cb = pending.context.get("on_reply")
            if cb is not None:
                cb(adu, pending)
