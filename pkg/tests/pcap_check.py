"""Independent PCAP reader and checksum validator for tests.

Parses the classic file format and the Ethernet/IPv4/TCP layers from raw
bytes, recomputing checksums from scratch. Deliberately shares no code with
the writer under test.
"""

import struct


def _ones_complement(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def read_pcap(path):
    """Returns (header dict, list of packet dicts). Raises ValueError on any
    structural or checksum problem."""
    blob = open(path, "rb").read()
    if len(blob) < 24:
        raise ValueError("truncated global header")
    magic = struct.unpack("<I", blob[:4])[0]
    if magic != 0xA1B2C3D4:
        raise ValueError(f"unexpected magic 0x{magic:08x}")
    vmaj, vmin, _tz, _sig, snaplen, network = struct.unpack("<HHiIII", blob[4:24])
    if network != 1:
        raise ValueError(f"unexpected linktype {network}")
    header = {"version": (vmaj, vmin), "snaplen": snaplen, "linktype": network}

    packets = []
    offset = 24
    while offset < len(blob):
        if offset + 16 > len(blob):
            raise ValueError("truncated record header")
        ts_sec, ts_usec, caplen, origlen = struct.unpack("<IIII", blob[offset:offset + 16])
        offset += 16
        if offset + caplen > len(blob):
            raise ValueError("truncated record body")
        frame = blob[offset:offset + caplen]
        offset += caplen
        packets.append(_parse_frame(ts_sec, ts_usec, frame))
    return header, packets


def _parse_frame(ts_sec, ts_usec, frame):
    if len(frame) < 14 + 20 + 20:
        raise ValueError("frame too short for eth+ip+tcp")
    dst_mac, src_mac, ethertype = frame[:6], frame[6:12], struct.unpack(">H", frame[12:14])[0]
    if ethertype != 0x0800:
        raise ValueError(f"not IPv4: ethertype 0x{ethertype:04x}")
    ip = frame[14:]
    vihl = ip[0]
    if vihl != 0x45:
        raise ValueError(f"unexpected version/IHL 0x{vihl:02x}")
    total_len = struct.unpack(">H", ip[2:4])[0]
    if total_len != len(ip):
        raise ValueError(f"IP total length {total_len} != actual {len(ip)}")
    if _ones_complement(ip[:20]) != 0:
        raise ValueError("bad IP header checksum")
    proto = ip[9]
    if proto != 6:
        raise ValueError(f"not TCP: protocol {proto}")
    src_ip = ".".join(map(str, ip[12:16]))
    dst_ip = ".".join(map(str, ip[16:20]))
    tcp = ip[20:]
    pseudo = ip[12:20] + struct.pack(">BBH", 0, 6, len(tcp))
    if _ones_complement(pseudo + tcp) != 0:
        raise ValueError("bad TCP checksum")
    sport, dport = struct.unpack(">HH", tcp[:4])
    seq, ack = struct.unpack(">II", tcp[4:12])
    payload = tcp[20:]
    return {
        "ts": ts_sec + ts_usec / 1e6,
        "dst_mac": dst_mac, "src_mac": src_mac,
        "src_ip": src_ip, "dst_ip": dst_ip,
        "sport": sport, "dport": dport,
        "seq": seq, "ack": ack,
        "payload": payload,
    }
