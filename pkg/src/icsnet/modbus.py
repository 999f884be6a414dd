"""Modbus/TCP codec, server-side register semantics and client bookkeeping.

Wire format is big-endian throughout. The MBAP header is 7 bytes
(transaction id, protocol id, length, unit id) and length counts the unit
id plus the PDU. Only the function subset needed by the plant/PLC/HMI
loops is fully decoded; anything else is framed as a raw PDU so a server
can answer it with an ILLEGAL FUNCTION exception instead of dropping the
connection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import EncodeError

READ_COILS = 0x01
READ_DISCRETE_INPUTS = 0x02
READ_HOLDING_REGISTERS = 0x03
READ_INPUT_REGISTERS = 0x04
WRITE_SINGLE_COIL = 0x05
WRITE_SINGLE_REGISTER = 0x06
WRITE_MULTIPLE_REGISTERS = 0x10

EXCEPTION_FLAG = 0x80

EXC_ILLEGAL_FUNCTION = 0x01
EXC_ILLEGAL_DATA_ADDRESS = 0x02
EXC_ILLEGAL_DATA_VALUE = 0x03
EXC_SERVER_BUSY = 0x06

VALID_EXCEPTION_CODES = (0x01, 0x02, 0x03, 0x06)

_READ_BIT_FUNCTIONS = (READ_COILS, READ_DISCRETE_INPUTS)
_READ_REG_FUNCTIONS = (READ_HOLDING_REGISTERS, READ_INPUT_REGISTERS)

MAX_READ_BITS = 2000
MAX_READ_REGISTERS = 125
MAX_WRITE_REGISTERS = 123

COIL_ON = 0xFF00
COIL_OFF = 0x0000

MBAP_SIZE = 7


# ---------------------------------------------------------------------------
# PDU variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReadRequest:
    """Read request for coils/discrete inputs/holding/input registers."""
    function: int
    address: int
    quantity: int


@dataclass(frozen=True)
class ReadBitsResponse:
    function: int
    bits: tuple


@dataclass(frozen=True)
class ReadRegistersResponse:
    function: int
    values: tuple


@dataclass(frozen=True)
class WriteSingleCoil:
    """Request and echo response share this shape. value is the raw uint16
    (0xFF00 on / 0x0000 off); anything else is rejected at execute time with
    ILLEGAL DATA VALUE, matching real server behavior."""
    address: int
    value: int

    function = WRITE_SINGLE_COIL

    @property
    def on(self):
        return self.value == COIL_ON


@dataclass(frozen=True)
class WriteSingleRegister:
    address: int
    value: int

    function = WRITE_SINGLE_REGISTER


@dataclass(frozen=True)
class WriteMultipleRegistersRequest:
    address: int
    values: tuple

    function = WRITE_MULTIPLE_REGISTERS


@dataclass(frozen=True)
class WriteMultipleRegistersResponse:
    address: int
    quantity: int

    function = WRITE_MULTIPLE_REGISTERS


@dataclass(frozen=True)
class ExceptionResponse:
    """function is the original request code; on the wire it carries code|0x80."""
    function: int
    code: int


@dataclass(frozen=True)
class RawPdu:
    """Syntactically framed PDU with a function code we do not model.

    Kept so servers can answer ILLEGAL FUNCTION and capture can still record
    the function byte.
    """
    function: int
    body: bytes


@dataclass(frozen=True)
class Adu:
    """One Modbus/TCP application data unit: MBAP header + PDU."""
    transaction_id: int
    unit_id: int
    pdu: object
    protocol_id: int = 0


class Incomplete:
    """Sentinel: the buffer does not yet hold one full ADU."""

    def __repr__(self):
        return "Incomplete"


class Malformed:
    """Sentinel: the buffer cannot be a valid ADU; caller should reset."""

    def __init__(self, reason):
        self.reason = reason

    def __repr__(self):
        return f"Malformed({self.reason!r})"


INCOMPLETE = Incomplete()


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _check_u16(value, what):
    if not 0 <= value <= 0xFFFF:
        raise EncodeError(f"{what} {value} outside uint16")


def _encode_pdu(pdu) -> bytes:
    if isinstance(pdu, ReadRequest):
        if pdu.function not in _READ_BIT_FUNCTIONS + _READ_REG_FUNCTIONS:
            raise EncodeError(f"not a read function: 0x{pdu.function:02x}")
        limit = MAX_READ_BITS if pdu.function in _READ_BIT_FUNCTIONS else MAX_READ_REGISTERS
        if not 1 <= pdu.quantity <= limit:
            raise EncodeError(f"read quantity {pdu.quantity} outside [1,{limit}]")
        _check_u16(pdu.address, "address")
        return struct.pack(">BHH", pdu.function, pdu.address, pdu.quantity)

    if isinstance(pdu, ReadBitsResponse):
        if pdu.function not in _READ_BIT_FUNCTIONS:
            raise EncodeError(f"not a bit-read function: 0x{pdu.function:02x}")
        if not 1 <= len(pdu.bits) <= MAX_READ_BITS:
            raise EncodeError("bit count outside [1,2000]")
        nbytes = (len(pdu.bits) + 7) // 8
        packed = bytearray(nbytes)
        for i, bit in enumerate(pdu.bits):
            if bit:
                packed[i // 8] |= 1 << (i % 8)
        return struct.pack(">BB", pdu.function, nbytes) + bytes(packed)

    if isinstance(pdu, ReadRegistersResponse):
        if pdu.function not in _READ_REG_FUNCTIONS:
            raise EncodeError(f"not a register-read function: 0x{pdu.function:02x}")
        if not 1 <= len(pdu.values) <= MAX_READ_REGISTERS:
            raise EncodeError("register count outside [1,125]")
        for v in pdu.values:
            _check_u16(v, "register value")
        return struct.pack(">BB", pdu.function, 2 * len(pdu.values)) + b"".join(
            struct.pack(">H", v) for v in pdu.values
        )

    if isinstance(pdu, WriteSingleCoil):
        _check_u16(pdu.address, "address")
        _check_u16(pdu.value, "coil value")
        return struct.pack(">BHH", WRITE_SINGLE_COIL, pdu.address, pdu.value)

    if isinstance(pdu, WriteSingleRegister):
        _check_u16(pdu.address, "address")
        _check_u16(pdu.value, "register value")
        return struct.pack(">BHH", WRITE_SINGLE_REGISTER, pdu.address, pdu.value)

    if isinstance(pdu, WriteMultipleRegistersRequest):
        if not 1 <= len(pdu.values) <= MAX_WRITE_REGISTERS:
            raise EncodeError(f"write quantity {len(pdu.values)} outside [1,{MAX_WRITE_REGISTERS}]")
        _check_u16(pdu.address, "address")
        for v in pdu.values:
            _check_u16(v, "register value")
        head = struct.pack(">BHHB", WRITE_MULTIPLE_REGISTERS, pdu.address,
                           len(pdu.values), 2 * len(pdu.values))
        return head + b"".join(struct.pack(">H", v) for v in pdu.values)

    if isinstance(pdu, WriteMultipleRegistersResponse):
        if not 1 <= pdu.quantity <= MAX_WRITE_REGISTERS:
            raise EncodeError(f"write quantity {pdu.quantity} outside [1,{MAX_WRITE_REGISTERS}]")
        _check_u16(pdu.address, "address")
        return struct.pack(">BHH", WRITE_MULTIPLE_REGISTERS, pdu.address, pdu.quantity)

    if isinstance(pdu, ExceptionResponse):
        if pdu.code not in VALID_EXCEPTION_CODES:
            raise EncodeError(f"exception code 0x{pdu.code:02x} not in allowed set")
        if not 0 <= pdu.function <= 0x7F:
            raise EncodeError("exception function outside [0,0x7f]")
        return struct.pack(">BB", pdu.function | EXCEPTION_FLAG, pdu.code)

    if isinstance(pdu, RawPdu):
        if not pdu.body and pdu.function is None:
            raise EncodeError("empty raw pdu")
        return struct.pack(">B", pdu.function) + pdu.body

    raise EncodeError(f"unknown pdu type {type(pdu).__name__}")


def encode(adu: Adu) -> bytes:
    """Encode one ADU to wire bytes. The MBAP length field is computed here,
    never trusted from the caller."""
    _check_u16(adu.transaction_id, "transaction id")
    if not 0 <= adu.unit_id <= 0xFF:
        raise EncodeError(f"unit id {adu.unit_id} outside uint8")
    if adu.protocol_id != 0:
        raise EncodeError("protocol id must be 0")
    pdu_bytes = _encode_pdu(adu.pdu)
    header = struct.pack(">HHHB", adu.transaction_id, 0, len(pdu_bytes) + 1, adu.unit_id)
    return header + pdu_bytes


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _decode_request_pdu(body: bytes):
    function = body[0]
    if function in _READ_BIT_FUNCTIONS + _READ_REG_FUNCTIONS:
        if len(body) != 5:
            return Malformed(f"read request fc 0x{function:02x} has size {len(body)}, want 5")
        address, quantity = struct.unpack(">HH", body[1:5])
        limit = MAX_READ_BITS if function in _READ_BIT_FUNCTIONS else MAX_READ_REGISTERS
        if not 1 <= quantity <= limit:
            return Malformed(f"read quantity {quantity} outside [1,{limit}]")
        return ReadRequest(function, address, quantity)
    if function == WRITE_SINGLE_COIL:
        if len(body) != 5:
            return Malformed("write single coil request has wrong size")
        address, value = struct.unpack(">HH", body[1:5])
        return WriteSingleCoil(address, value)
    if function == WRITE_SINGLE_REGISTER:
        if len(body) != 5:
            return Malformed("write single register request has wrong size")
        address, value = struct.unpack(">HH", body[1:5])
        return WriteSingleRegister(address, value)
    if function == WRITE_MULTIPLE_REGISTERS:
        if len(body) < 6:
            return Malformed("write multiple request too short")
        address, quantity, byte_count = struct.unpack(">HHB", body[1:6])
        if not 1 <= quantity <= MAX_WRITE_REGISTERS:
            return Malformed(f"write quantity {quantity} outside [1,{MAX_WRITE_REGISTERS}]")
        if byte_count != 2 * quantity or len(body) != 6 + byte_count:
            return Malformed("write multiple byte count inconsistent")
        values = struct.unpack(f">{quantity}H", body[6:])
        return WriteMultipleRegistersRequest(address, values)
    return RawPdu(function, bytes(body[1:]))


def _decode_response_pdu(body: bytes):
    function = body[0]
    if function & EXCEPTION_FLAG:
        if len(body) != 2:
            return Malformed("exception response has wrong size")
        code = body[1]
        if code not in VALID_EXCEPTION_CODES:
            return Malformed(f"exception code 0x{code:02x} not in allowed set")
        return ExceptionResponse(function & ~EXCEPTION_FLAG, code)
    if function in _READ_BIT_FUNCTIONS:
        if len(body) < 2 or len(body) != 2 + body[1]:
            return Malformed("bit-read response byte count inconsistent")
        nbytes = body[1]
        bits = tuple(bool(body[2 + i // 8] >> (i % 8) & 1) for i in range(nbytes * 8))
        return ReadBitsResponse(function, bits)
    if function in _READ_REG_FUNCTIONS:
        if len(body) < 2 or len(body) != 2 + body[1] or body[1] % 2:
            return Malformed("register-read response byte count inconsistent")
        count = body[1] // 2
        values = struct.unpack(f">{count}H", body[2:])
        return ReadRegistersResponse(function, values)
    if function == WRITE_SINGLE_COIL:
        if len(body) != 5:
            return Malformed("write single coil response has wrong size")
        address, value = struct.unpack(">HH", body[1:5])
        return WriteSingleCoil(address, value)
    if function == WRITE_SINGLE_REGISTER:
        if len(body) != 5:
            return Malformed("write single register response has wrong size")
        address, value = struct.unpack(">HH", body[1:5])
        return WriteSingleRegister(address, value)
    if function == WRITE_MULTIPLE_REGISTERS:
        if len(body) != 5:
            return Malformed("write multiple response has wrong size")
        address, quantity = struct.unpack(">HH", body[1:5])
        return WriteMultipleRegistersResponse(address, quantity)
    return RawPdu(function, bytes(body[1:]))


def decode(buffer: bytes, kind: str = "request"):
    """Decode the first ADU from buffer.

    Returns (Adu, consumed) on success, INCOMPLETE while more bytes are
    needed, or Malformed when the stream cannot recover (caller resets the
    connection). kind selects request vs response body layouts; direction
    is known from the flow role, as on a real TCP connection.
    """
    if len(buffer) < MBAP_SIZE:
        return INCOMPLETE
    transaction_id, protocol_id, length, unit_id = struct.unpack(">HHHB", buffer[:MBAP_SIZE])
    if protocol_id != 0:
        return Malformed(f"protocol id 0x{protocol_id:04x}")
    if length < 2:
        return Malformed(f"length field {length} too small")
    total = 6 + length
    if len(buffer) < total:
        return INCOMPLETE
    body = buffer[MBAP_SIZE:total]
    if kind == "request":
        pdu = _decode_request_pdu(body)
    elif kind == "response":
        pdu = _decode_response_pdu(body)
    else:
        raise ValueError(f"kind must be request or response, not {kind!r}")
    if isinstance(pdu, Malformed):
        return pdu
    return Adu(transaction_id, unit_id, pdu), total


# ---------------------------------------------------------------------------
# Register bank and request execution
# ---------------------------------------------------------------------------

class RegisterBank:
    """Fixed-size coil/discrete/holding/input arrays for one server.

    Out-of-range access never traps; execute() turns it into an
    ILLEGAL DATA ADDRESS exception response.
    """

    def __init__(self, coils=0, discrete_inputs=0, holding=0, input_registers=0):
        self.coils = [False] * coils
        self.discrete_inputs = [False] * discrete_inputs
        self.holding = [0] * holding
        self.input = [0] * input_registers

    def sizes(self):
        return {
            "coils": len(self.coils),
            "discrete_inputs": len(self.discrete_inputs),
            "holding": len(self.holding),
            "input": len(self.input),
        }


def execute(request, unit_id: int, bank: RegisterBank):
    """Apply one decoded request PDU to a bank and return the response PDU.

    Reads never mutate; writes validate everything before touching the bank
    so a request either fully applies or leaves it untouched.
    """
    if isinstance(request, ReadRequest):
        if request.function == READ_COILS:
            array = bank.coils
        elif request.function == READ_DISCRETE_INPUTS:
            array = bank.discrete_inputs
        elif request.function == READ_HOLDING_REGISTERS:
            array = bank.holding
        else:
            array = bank.input
        if request.address + request.quantity > len(array):
            return ExceptionResponse(request.function, EXC_ILLEGAL_DATA_ADDRESS)
        window = array[request.address:request.address + request.quantity]
        if request.function in _READ_BIT_FUNCTIONS:
            return ReadBitsResponse(request.function, tuple(bool(b) for b in window))
        return ReadRegistersResponse(request.function, tuple(window))

    if isinstance(request, WriteSingleCoil):
        if request.value not in (COIL_ON, COIL_OFF):
            return ExceptionResponse(WRITE_SINGLE_COIL, EXC_ILLEGAL_DATA_VALUE)
        if request.address >= len(bank.coils):
            return ExceptionResponse(WRITE_SINGLE_COIL, EXC_ILLEGAL_DATA_ADDRESS)
        bank.coils[request.address] = request.value == COIL_ON
        return request

    if isinstance(request, WriteSingleRegister):
        if request.address >= len(bank.holding):
            return ExceptionResponse(WRITE_SINGLE_REGISTER, EXC_ILLEGAL_DATA_ADDRESS)
        bank.holding[request.address] = request.value
        return request

    if isinstance(request, WriteMultipleRegistersRequest):
        if request.address + len(request.values) > len(bank.holding):
            return ExceptionResponse(WRITE_MULTIPLE_REGISTERS, EXC_ILLEGAL_DATA_ADDRESS)
        for i, v in enumerate(request.values):
            bank.holding[request.address + i] = v
        return WriteMultipleRegistersResponse(request.address, len(request.values))

    if isinstance(request, RawPdu):
        return ExceptionResponse(request.function, EXC_ILLEGAL_FUNCTION)

    # Response-shaped PDUs routed at a server are a protocol violation.
    return ExceptionResponse(getattr(request, "function", 0), EXC_ILLEGAL_FUNCTION)


# ---------------------------------------------------------------------------
# Client-side bookkeeping
# ---------------------------------------------------------------------------

class StrayResponse(Exception):
    """Response with a transaction id that matches no pending request."""


@dataclass
class PendingRequest:
    transaction_id: int
    pdu: object
    sent_ts_ns: int = 0
    context: object = None


@dataclass
class ClientState:
    """Transaction id allocation and in-flight request matching for one client."""
    unit_id: int = 1
    last_tid: int = 0
    pending: dict = field(default_factory=dict)
    stray_count: int = 0

    def next_request(self, pdu, ts_ns: int = 0, context=None) -> Adu:
        """Allocate the next transaction id (wraps mod 2^16) and track the request."""
        self.last_tid = (self.last_tid + 1) & 0xFFFF
        adu = Adu(self.last_tid, self.unit_id, pdu)
        self.pending[self.last_tid] = PendingRequest(self.last_tid, pdu, ts_ns, context)
        return adu

    def match_response(self, adu: Adu) -> PendingRequest:
        """Resolve a response against the pending table.

        Raises StrayResponse for unknown (or already resolved) transaction
        ids; callers log and drop those.
        """
        entry = self.pending.pop(adu.transaction_id, None)
        if entry is None:
            self.stray_count += 1
            raise StrayResponse(f"tid {adu.transaction_id} has no pending request")
        return entry

    def forget(self, transaction_id: int):
        """Drop a pending entry after a timeout; a late response becomes stray."""
        self.pending.pop(transaction_id, None)


def coil_write(address: int, on: bool) -> WriteSingleCoil:
    return WriteSingleCoil(address, COIL_ON if on else COIL_OFF)


def is_exception(pdu) -> bool:
    return isinstance(pdu, ExceptionResponse)
