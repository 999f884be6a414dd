"""Paced-mode gateway tests over real HTTP and WebSocket connections."""

import json
import threading
import time
import urllib.error
import urllib.request

from websockets.sync.client import connect as ws_connect

from icsnet import runtime
from icsnet.gateway import run_paced_with_gateway


class PacedRun:
    """Drives a paced run with gateway in a background thread."""

    def __init__(self, raw, out_dir):
        self.raw = raw
        self.out_dir = out_dir
        self.ready = threading.Event()
        self.stop_flag = threading.Event()
        self.gateway = None
        self.sim = None
        self.manifest = None
        self.error = None
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _on_started(self, gw, sim):
        self.gateway = gw
        self.sim = sim
        self.ready.set()

    def _run(self):
        try:
            self.manifest = run_paced_with_gateway(
                self.raw, self.out_dir, bind="127.0.0.1:0",
                stop_flag=self.stop_flag, on_started=self._on_started)
        except Exception as exc:  # surfaced in the test thread
            self.error = exc
            self.ready.set()

    def __enter__(self):
        self.thread.start()
        assert self.ready.wait(timeout=15), "gateway did not start"
        if self.error:
            raise self.error
        # First quantum published a snapshot once sim_running flips.
        deadline = time.time() + 5
        while not self.gateway.sim_running and time.time() < deadline:
            time.sleep(0.01)
        return self

    def __exit__(self, *exc):
        self.stop_flag.set()
        self.thread.join(timeout=30)

    @property
    def base(self):
        return f"http://127.0.0.1:{self.gateway.bound_port}"

    def get(self, path):
        with urllib.request.urlopen(self.base + path, timeout=10) as resp:
            return json.loads(resp.read())

    def post(self, path, body):
        req = urllib.request.Request(
            self.base + path, data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                return resp.status, json.loads(resp.read())
        except urllib.error.HTTPError as err:
            return err.code, json.loads(err.read())


SCENARIO = {"seed": 4, "duration_s": 30.0, "mode": "paced"}


class TestGatewayHttp:
    def test_tags_snapshot_and_topology(self, tmp_path):
        with PacedRun(SCENARIO, tmp_path / "out") as run:
            deadline = time.time() + 5
            tags = {}
            while time.time() < deadline:
                payload = run.get("/api/tags")
                tags = {t["name"]: t for t in payload["tags"]}
                if all(tags.get(n, {}).get("value") is not None
                       for n in ("plc1.pressure", "plc1.t_set", "plc1.heater")):
                    break
                time.sleep(0.2)
            pressure = tags["plc1.pressure"]
            assert pressure["units"] == "kPa"
            assert 20.0 < pressure["value"] < 40.0  # ~24.9 kPa at ambient
            assert tags["plc1.t_set"]["value"] == 310.0  # default 3100 deci-K
            assert tags["plc1.heater"]["kind"] == "status"

            topo = run.get("/api/topology")
            kinds = {n["kind"] for n in topo["nodes"]}
            assert kinds == {"Plant", "PLC", "HMI", "Attacker"}

    def test_setpoint_round_trip(self, tmp_path):
        with PacedRun(SCENARIO, tmp_path / "out") as run:
            status, body = run.post("/api/setpoints",
                                    {"tag": "plc1.p_set", "value": 250.0,
                                     "request_id": "r1"})
            assert status == 200 and body["ok"], body
            # Register is already 2500 when the write confirms.
            assert run.sim.plcs["plc1"].bank.holding[0] == 2500
            # And the next poll shows it in the snapshot.
            deadline = time.time() + 3
            while time.time() < deadline:
                tags = {t["name"]: t for t in run.get("/api/tags")["tags"]}
                if tags["plc1.p_set"]["value"] == 250.0:
                    break
                time.sleep(0.2)
            assert tags["plc1.p_set"]["value"] == 250.0

    def test_limit_violation_is_400(self, tmp_path):
        with PacedRun(SCENARIO, tmp_path / "out") as run:
            status, body = run.post("/api/setpoints",
                                    {"tag": "plc1.p_set", "value": 99999.0,
                                     "request_id": "r2"})
            assert status == 400
            assert "limits" in body["detail"]

    def test_non_setpoint_tag_is_400(self, tmp_path):
        with PacedRun(SCENARIO, tmp_path / "out") as run:
            status, body = run.post("/api/setpoints",
                                    {"tag": "plc1.pressure", "value": 250.0})
            assert status == 400

    def test_write_failure_surfaced(self, tmp_path):
        # A PLC whose service queue takes 5 s per request cannot confirm the
        # write inside the HMI timeout: the command must fail cleanly.
        raw = {"seed": 4, "duration_s": 30.0, "mode": "paced",
               "plcs": [{"id": "plc1", "plant_ref": "plant1",
                         "service": {"capacity": 4, "service_rate": 0.2}}]}
        with PacedRun(raw, tmp_path / "out") as run:
            status, body = run.post("/api/setpoints",
                                    {"tag": "plc1.p_set", "value": 250.0,
                                     "request_id": "r3"})
            assert status == 502
            assert not body["ok"]

    def test_stream_delivers_tags_within_heartbeat(self, tmp_path):
        with PacedRun(SCENARIO, tmp_path / "out") as run:
            url = f"ws://127.0.0.1:{run.gateway.bound_port}/api/stream"
            with ws_connect(url, open_timeout=10) as ws:
                message = json.loads(ws.recv(timeout=5))
                assert message["type"] == "tags"
                names = {t["name"] for t in message["tags"]}
                assert "plc1.pressure" in names
                # Stream ticks about once a second.
                t0 = time.time()
                json.loads(ws.recv(timeout=5))
                assert time.time() - t0 < 3.0

    def test_artifacts_written_after_paced_run(self, tmp_path):
        raw = {"seed": 4, "duration_s": 2.0, "mode": "paced"}
        out = tmp_path / "out"
        run = PacedRun(raw, out)
        with run:
            pass  # run to completion via stop flag after scope exit
        run.thread.join(timeout=30)
        assert run.error is None
        assert run.manifest is not None
        assert (out / "manifest.json").exists()
        assert run.manifest["mode"] == "paced"
        assert "wall_clock_offset_s" in run.manifest

    def test_setpoint_409_when_simulation_not_running(self):
        # Gateway up, paced loop not started: commands are refused.
        from icsnet import coordinator, runtime as rt
        from icsnet.gateway import Gateway
        cfg = coordinator.parse_scenario({"seed": 1, "duration_s": 5.0,
                                          "mode": "paced"})
        sim = rt.build_simulation(cfg)
        gw = Gateway(sim, "127.0.0.1:0")
        gw.start()
        try:
            req = urllib.request.Request(
                f"http://127.0.0.1:{gw.bound_port}/api/setpoints",
                data=json.dumps({"tag": "plc1.p_set", "value": 250.0}).encode(),
                headers={"Content-Type": "application/json"}, method="POST")
            try:
                urllib.request.urlopen(req, timeout=5)
                status = 200
            except urllib.error.HTTPError as err:
                status = err.code
            assert status == 409
        finally:
            gw.stop()

    def test_cli_run_honors_scenario_paced_mode(self, tmp_path):
        # Regression: a scenario-declared paced mode must bring the gateway
        # up even without an explicit --mode flag.
        from icsnet import cli
        port = 18799
        raw = {"seed": 4, "duration_s": 4.0, "mode": "paced",
               "gateway": {"bind": f"127.0.0.1:{port}"}}
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps(raw))
        out = tmp_path / "out"
        codes = {}
        worker = threading.Thread(
            target=lambda: codes.update(code=cli.main(
                ["run", str(scenario), "--out", str(out)])), daemon=True)
        worker.start()
        deadline = time.time() + 10
        reached = False
        while time.time() < deadline and not reached:
            try:
                with urllib.request.urlopen(
                        f"http://127.0.0.1:{port}/api/tags", timeout=2):
                    reached = True
            except OSError:
                time.sleep(0.2)
        worker.join(timeout=30)
        assert reached, "gateway never served during a scenario-paced CLI run"
        assert codes.get("code") == 0
