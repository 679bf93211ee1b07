"""
Protocolo ISWF: tramas binárias bit a bit exatas entre cabeça e cauda.

Layout (little-endian):
    magic "ISWF" | version u16 | msg_type u8 | request_id u64 | dtype u8 |
    rank u8 | dims rank×u32 | payload | crc32 u32 (sobre tudo o que precede)

rank 0 significa "sem tensor" (ping): a trama tem 21 bytes. No socket cada
trama é precedida pelo seu comprimento (u32).
"""
import logging
import socket
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from math import prod

import numpy as np

from .exceptions import WireError

logger = logging.getLogger(__name__)

MAGIC = b"ISWF"
VERSION = 1
HEADER = struct.Struct('<4sHBQBB')
HEADER_SIZE = HEADER.size  # 17
CRC_SIZE = 4
LENGTH_PREFIX = struct.Struct('<I')


class MsgType(IntEnum):
    INFER_REQUEST = 0
    INFER_RESPONSE = 1
    ERROR = 2
    PING = 3


class DType(IntEnum):
    F32 = 0
    F64 = 1


class ErrorCode(IntEnum):
    """Motivo de rejeição; viaja no tensor (1,) de uma trama de erro."""
    TRUNCATED = 1
    BAD_MAGIC = 2
    BAD_VERSION = 3
    BAD_CRC = 4
    BAD_MSG_TYPE = 5
    BAD_DTYPE = 6
    LENGTH_MISMATCH = 7
    SHAPE_MISMATCH = 8
    FRAME_TOO_LARGE = 9
    INTERNAL = 10
    BUSY = 11


_NUMPY_DTYPES = {DType.F32: np.dtype('<f4'), DType.F64: np.dtype('<f8')}


@dataclass(eq=False)
class Frame:
    msg_type: MsgType
    request_id: int
    tensor: np.ndarray | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        if (self.msg_type, self.request_id) != (other.msg_type, other.request_id):
            return False
        if self.tensor is None or other.tensor is None:
            return self.tensor is None and other.tensor is None
        # Comparação de bits: distingue -0.0 de 0.0 e aceita NaN iguais
        return (self.tensor.dtype == other.tensor.dtype and self.tensor.shape == other.tensor.shape
                and self.tensor.tobytes() == other.tensor.tobytes())

    @property
    def error_code(self) -> ErrorCode | None:
        if self.msg_type != MsgType.ERROR or self.tensor is None or self.tensor.size == 0:
            return None
        return ErrorCode(int(self.tensor.reshape(-1)[0]))


def ping(request_id: int) -> Frame:
    return Frame(MsgType.PING, request_id)


def error_frame(request_id: int, code: ErrorCode) -> Frame:
    return Frame(MsgType.ERROR, request_id, np.array([int(code)], dtype=np.float32))


def _dtype_code(array: np.ndarray) -> DType:
    if array.dtype == np.float32:
        return DType.F32
    if array.dtype == np.float64:
        return DType.F64
    raise WireError(ErrorCode.BAD_DTYPE, f"dtype {array.dtype} não suportado (use f32 ou f64).")


def encode_frame(frame: Frame) -> bytes:
    tensor = frame.tensor
    if tensor is None:
        dtype, dims, payload = DType.F32, (), b''
    else:
        if tensor.ndim == 0 or tensor.ndim > 255:
            raise WireError(ErrorCode.SHAPE_MISMATCH, f"Rank {tensor.ndim} não representável.")
        dtype, dims = _dtype_code(tensor), tensor.shape
        payload = np.ascontiguousarray(tensor, dtype=_NUMPY_DTYPES[dtype]).tobytes()
    body = b''.join((
        HEADER.pack(MAGIC, VERSION, int(frame.msg_type), int(frame.request_id), int(dtype), len(dims)),
        struct.pack(f'<{len(dims)}I', *dims),
        payload,
    ))
    return body + struct.pack('<I', zlib.crc32(body))


def decode_frame(raw: bytes) -> Frame:
    """Valida e lê uma trama; cada defeito levanta WireError com código próprio."""
    raw = bytes(raw)
    if len(raw) < HEADER_SIZE + CRC_SIZE:
        raise WireError(ErrorCode.TRUNCATED, f"Trama com {len(raw)} bytes (mínimo {HEADER_SIZE + CRC_SIZE}).")
    magic, version, msg_type, request_id, dtype, rank = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise WireError(ErrorCode.BAD_MAGIC, f"Magic inválido: {magic!r}.")
    if version != VERSION:
        raise WireError(ErrorCode.BAD_VERSION, f"Versão {version} não suportada (esperava {VERSION}).")
    body, (stored_crc,) = raw[:-CRC_SIZE], struct.unpack('<I', raw[-CRC_SIZE:])
    if zlib.crc32(body) != stored_crc:
        raise WireError(ErrorCode.BAD_CRC, f"CRC32 não confere no pedido {request_id}.")
    if msg_type not in MsgType._value2member_map_:
        raise WireError(ErrorCode.BAD_MSG_TYPE, f"msg_type {msg_type} desconhecido.")
    if dtype not in DType._value2member_map_:
        raise WireError(ErrorCode.BAD_DTYPE, f"dtype {dtype} desconhecido.")
    dims_end = HEADER_SIZE + 4 * rank
    if len(body) < dims_end:
        raise WireError(ErrorCode.TRUNCATED, f"Dimensões truncadas (rank {rank}).")
    dims = struct.unpack_from(f'<{rank}I', body, HEADER_SIZE)
    numpy_dtype = _NUMPY_DTYPES[DType(dtype)]
    expected = prod(dims) * numpy_dtype.itemsize if rank else 0
    if len(body) - dims_end != expected:
        raise WireError(
            ErrorCode.LENGTH_MISMATCH,
            f"Payload de {len(body) - dims_end} bytes para dims {dims} (esperava {expected}).",
        )
    tensor = None
    if rank:
        tensor = np.frombuffer(body, dtype=numpy_dtype, count=prod(dims), offset=dims_end).reshape(dims)
        tensor = tensor.astype(numpy_dtype.newbyteorder('='))
    return Frame(MsgType(msg_type), request_id, tensor)


# --- Transporte em stream ---

def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks, received = [], 0
    while received < count:
        chunk = sock.recv(min(count - received, 1 << 20))
        if not chunk:
            raise ConnectionError(f"Ligação fechada a meio de uma trama ({received}/{count} bytes).")
        chunks.append(chunk)
        received += len(chunk)
    return b''.join(chunks)


def send_frame(sock: socket.socket, frame: Frame | bytes) -> None:
    raw = frame if isinstance(frame, (bytes, bytearray)) else encode_frame(frame)
    sock.sendall(LENGTH_PREFIX.pack(len(raw)) + raw)


def recv_frame_bytes(sock: socket.socket, max_bytes: int) -> bytes | None:
    """
    Lê uma trama com prefixo de comprimento; None se a ligação fechou entre tramas.

    Um comprimento acima de `max_bytes` levanta WireError(FRAME_TOO_LARGE)
    sem ler o corpo. Depois do primeiro byte, um timeout ou um fecho da
    ligação levantam WireError(TRUNCATED).
    """
    first = sock.recv(LENGTH_PREFIX.size)
    if not first:
        return None
    try:
        prefix = first + _recv_exact(sock, LENGTH_PREFIX.size - len(first))
        (length,) = LENGTH_PREFIX.unpack(prefix)
        if length > max_bytes:
            raise WireError(ErrorCode.FRAME_TOO_LARGE, f"Trama de {length} bytes excede o máximo de {max_bytes}.")
        return _recv_exact(sock, length)
    except (socket.timeout, ConnectionError) as exc:
        raise WireError(ErrorCode.TRUNCATED, f"Trama incompleta: {exc}") from exc
