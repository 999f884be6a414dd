"""Paced-mode operator gateway.

Serves tag snapshots and topology over HTTP, streams tag updates at 1 Hz
over a WebSocket, and turns operator setpoint commands into Modbus writes.
All simulation interaction funnels through the fabric's serialized command
queue; the HTTP side only ever reads published snapshots, so the event loop
stays the single owner of simulation state.
"""

from __future__ import annotations

import asyncio
import json
import logging
import threading
from pathlib import Path

from aiohttp import WSMsgType, web

from . import modbus, runtime
from .errors import GatewayModeError
from .fabric import NS_PER_S

log = logging.getLogger(__name__)

COMMAND_TIMEOUT_S = 3.0

_SETPOINT_ADDR = {"p_set": 0, "t_set": 1}
_LIMIT_KEY = {"p_set": "p_set_kpa", "t_set": "t_set_k"}


def _tag_dict(tag) -> dict:
    return {"name": tag.name, "component_id": tag.component_id, "kind": tag.kind,
            "value": tag.value, "units": tag.units, "ts_ns": tag.ts_ns,
            "stale": tag.stale}


class Gateway:
    """HTTP/WS server facing operators; one per paced run."""

    def __init__(self, sim, bind: str = "127.0.0.1:8700", static_dir=None):
        if sim.cfg.mode != "paced":
            raise GatewayModeError(
                "gateway serves paced runs only; fast mode has no operator to serve")
        self.sim = sim
        host, _, port = bind.partition(":")
        self.host = host or "127.0.0.1"
        self.port = int(port or 8700)
        self.static_dir = Path(static_dir) if static_dir else None
        self.sim_running = False
        self._loop = None
        self._thread = None
        self._runner = None
        self._clients: set[asyncio.Queue] = set()
        self._started = threading.Event()
        self.bound_port = None

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._serve, name="gateway", daemon=True)
        self._thread.start()
        if not self._started.wait(timeout=10):
            raise RuntimeError("gateway failed to start")

    def _serve(self):
        self._loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self._loop)
        app = web.Application()
        app.router.add_get("/api/tags", self._handle_tags)
        app.router.add_get("/api/topology", self._handle_topology)
        app.router.add_post("/api/setpoints", self._handle_setpoint)
        app.router.add_get("/api/stream", self._handle_stream)
        if self.static_dir and self.static_dir.is_dir():
            app.router.add_get("/", self._handle_index)
            app.router.add_static("/", self.static_dir)
        self._loop.run_until_complete(self._start_app(app))
        self._started.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self._loop.shutdown_asyncgens())
        self._loop.close()

    async def _start_app(self, app):
        self._runner = web.AppRunner(app)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self.port)
        await site.start()
        server = site._server  # bound socket; port 0 resolves here
        self.bound_port = server.sockets[0].getsockname()[1]

    def stop(self):
        if self._loop is None:
            return
        async def shutdown():
            await self._runner.cleanup()
            self._loop.stop()
        asyncio.run_coroutine_threadsafe(shutdown(), self._loop)
        self._thread.join(timeout=10)

    # -- snapshot plumbing ---------------------------------------------------

    def _snapshot(self) -> dict:
        snap = self.sim.published_snapshot
        if not snap:
            snap = self.sim.poller.snapshot()
        return snap

    def publish_stream_tick(self):
        """Called from the paced loop about once per second: fan the current
        snapshot out to every stream client."""
        message = json.dumps({
            "type": "tags",
            "ts_ns": self.sim.fabric.clock,
            "tags": [_tag_dict(t) for t in self._snapshot().values()],
        })
        self._broadcast(message)

    def _broadcast(self, message: str):
        if self._loop is None:
            return
        def fanout():
            for queue in list(self._clients):
                queue.put_nowait(message)
        self._loop.call_soon_threadsafe(fanout)

    # -- handlers ------------------------------------------------------------

    async def _handle_index(self, request):
        return web.FileResponse(self.static_dir / "index.html")

    async def _handle_tags(self, request):
        return web.json_response({
            "ts_ns": self.sim.fabric.clock,
            "tags": [_tag_dict(t) for t in self._snapshot().values()],
        })

    async def _handle_topology(self, request):
        return web.json_response(runtime.topology_to_dict(self.sim.topology))

    async def _handle_setpoint(self, request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return web.json_response({"ok": False, "detail": "body must be JSON"},
                                     status=400)
        tag_name = body.get("tag", "")
        request_id = body.get("request_id", "")
        try:
            value = float(body.get("value"))
        except (TypeError, ValueError):
            return web.json_response({"ok": False, "detail": "value must be a number"},
                                     status=400)

        snap = self._snapshot()
        tag = snap.get(tag_name)
        if tag is None or tag.kind != "setpoint":
            return web.json_response(
                {"ok": False, "detail": f"{tag_name!r} is not a writable setpoint tag"},
                status=400)
        field = tag_name.rsplit(".", 1)[1]
        lo, hi = self.sim.cfg.hmi.limits[_LIMIT_KEY[field]]
        if not lo <= value <= hi:
            return web.json_response(
                {"ok": False,
                 "detail": f"value {value} outside limits [{lo}, {hi}] for {tag_name}"},
                status=400)
        if not self.sim_running:
            return web.json_response({"ok": False, "detail": "simulation not running"},
                                     status=409)

        plc = tag.component_id
        address = _SETPOINT_ADDR[field]
        register_value = round(value * 10)
        done = threading.Event()
        outcome = {}

        def command(fabric):
            def on_reply(adu, pending):
                if modbus.is_exception(adu.pdu):
                    outcome.update(ok=False,
                                   detail=f"plc exception 0x{adu.pdu.code:02x}")
                else:
                    outcome.update(ok=True, detail="confirmed")
                done.set()

            def on_timeout(pending):
                outcome.update(ok=False, detail="write timed out")
                done.set()

            self.sim.poller.write_setpoint(plc, address, register_value,
                                           on_reply=on_reply, on_timeout=on_timeout)

        self.sim.fabric.post_command(command)
        loop = asyncio.get_running_loop()
        completed = await loop.run_in_executor(None,
                                               lambda: done.wait(COMMAND_TIMEOUT_S))
        if not completed:
            outcome.update(ok=False, detail="no response from simulation")
        result = {"ok": outcome.get("ok", False), "request_id": request_id,
                  "detail": outcome.get("detail", "")}
        self._broadcast(json.dumps({"type": "command_result", **result}))
        return web.json_response(result, status=200 if result["ok"] else 502)

    async def _handle_stream(self, request):
        ws = web.WebSocketResponse(heartbeat=30)
        await ws.prepare(request)
        queue: asyncio.Queue = asyncio.Queue()
        self._clients.add(queue)
        try:
            sender = asyncio.create_task(self._pump(ws, queue))
            async for msg in ws:
                if msg.type in (WSMsgType.CLOSE, WSMsgType.ERROR):
                    break
            sender.cancel()
        finally:
            self._clients.discard(queue)
        return ws

    async def _pump(self, ws, queue):
        while True:
            message = await queue.get()
            await ws.send_str(message)


def run_paced_with_gateway(scenario, out_dir, seed=None, bind=None,
                           static_dir=None, stop_flag=None, on_started=None):
    """CLI paced run: gateway up for the duration of the simulation."""
    holder = {}

    def driver(sim, execute):
        chosen_bind = bind or sim.cfg.gateway.get("bind", "127.0.0.1:8700")
        chosen_static = static_dir or sim.cfg.gateway.get("static_dir")
        if chosen_static is None and Path("frontend/dist").is_dir():
            chosen_static = "frontend/dist"
        gw = Gateway(sim, chosen_bind, chosen_static)
        gw.start()
        holder["gateway"] = gw
        gw.sim_running = True
        last_stream = [0]

        def on_quantum(sim):
            if sim.fabric.clock - last_stream[0] >= NS_PER_S:
                last_stream[0] = sim.fabric.clock
                gw.publish_stream_tick()

        if on_started is not None:
            on_started(gw, sim)
        try:
            execute(on_quantum=on_quantum, stop_flag=stop_flag)
        finally:
            gw.sim_running = False
            gw.stop()

    return runtime.run(scenario, out_dir, mode="paced", seed=seed, paced_driver=driver)
