"""Classic PCAP writer with synthetic Ethernet/IPv4/TCP encapsulation.

The fabric carries bare application payloads, so link-layer framing is
synthesized here: stable locally-administered MACs per node, IPv4 headers
with correct checksums, and TCP segments with cumulative per-direction
sequence numbers so standard analyzers follow the streams without
complaint. Timestamps are virtual nanoseconds truncated to microseconds.
"""

from __future__ import annotations

import struct

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535

_FLAGS_PSH_ACK = 0x18
_TCP_WINDOW = 8192


def checksum16(data: bytes) -> int:
    """RFC 1071 ones'-complement sum."""
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def mac_for(ordinal: int) -> bytes:
    return bytes([0x02, 0, 0, 0, 0, ordinal & 0xFF])


def ip_bytes(dotted: str) -> bytes:
    return bytes(int(p) for p in dotted.split("."))


def ipv4_header(src: str, dst: str, payload_len: int, ident: int) -> bytes:
    head = struct.pack(
        ">BBHHHBBH4s4s",
        0x45, 0x00, 20 + 20 + payload_len,
        ident & 0xFFFF, 0x4000,  # DF
        64, 6, 0,
        ip_bytes(src), ip_bytes(dst),
    )
    cksum = checksum16(head)
    return head[:10] + struct.pack(">H", cksum) + head[12:]


def tcp_segment(src_ip: str, dst_ip: str, sport: int, dport: int,
                seq: int, ack: int, payload: bytes) -> bytes:
    head = struct.pack(
        ">HHIIBBHHH",
        sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
        0x50, _FLAGS_PSH_ACK, _TCP_WINDOW, 0, 0,
    )
    pseudo = ip_bytes(src_ip) + ip_bytes(dst_ip) + struct.pack(">BBH", 0, 6,
                                                               len(head) + len(payload))
    cksum = checksum16(pseudo + head + payload)
    return head[:16] + struct.pack(">H", cksum) + head[18:] + payload


class FlowCursor:
    """Per-direction byte counters so sequence numbers accumulate the way a
    real TCP stream would after its handshake."""

    def __init__(self):
        self.sent = {True: 0, False: 0}  # keyed by is_request
        self.ident = 0

    def next_segment(self, is_request: bool, length: int):
        seq = 1 + self.sent[is_request]
        ack = 1 + self.sent[not is_request]
        self.sent[is_request] += length
        self.ident += 1
        return seq, ack, self.ident


class PcapWriter:
    """Accumulates encapsulated frames; one write_pcap() call per run."""

    def __init__(self, node_ordinals: dict):
        self.node_ordinals = node_ordinals
        self._cursors: dict[int, FlowCursor] = {}
        self._segment_cache: dict[int, tuple] = {}
        self.records: list[bytes] = []

    def add(self, ts_ns: int, frame_id: int, flow_id: int, is_request: bool,
            src_node: str, dst_node: str, src_ip: str, sport: int,
            dst_ip: str, dport: int, payload: bytes):
        # A frame observed on both halves of an interposed link is the same
        # TCP segment; reuse its numbers instead of advancing the stream.
        cached = self._segment_cache.get(frame_id)
        if cached is None:
            cursor = self._cursors.setdefault(flow_id, FlowCursor())
            cached = cursor.next_segment(is_request, len(payload))
            self._segment_cache[frame_id] = cached
        seq, ack, ident = cached

        ether = (mac_for(self.node_ordinals[dst_node])
                 + mac_for(self.node_ordinals[src_node])
                 + b"\x08\x00")
        ip = ipv4_header(src_ip, dst_ip, len(payload), ident)
        tcp = tcp_segment(src_ip, dst_ip, sport, dport, seq, ack, payload)
        packet = ether + ip + tcp
        header = struct.pack("<IIII", ts_ns // 1_000_000_000,
                             (ts_ns % 1_000_000_000) // 1000,
                             len(packet), len(packet))
        self.records.append(header + packet)

    def write(self, path):
        with open(path, "wb") as fh:
            fh.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, SNAPLEN,
                                 LINKTYPE_ETHERNET))
            for record in self.records:
                fh.write(record)
