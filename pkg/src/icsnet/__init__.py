"""Deterministic ICS honeynet simulator.

Plant/PLC/HMI components talk Modbus/TCP over an in-process discrete-event
network fabric; an attack coordinator plans and executes multi-step attacks
against them; every frame is captured, enriched and labeled from provenance
into IDS-ready datasets.
"""

__version__ = "0.1.0"
