"""
Execução dividida através da rede: servidor da cauda, cliente da cabeça,
estimativa de transferência e relatório de varrimento dos pontos de divisão.
"""
import logging
import socket
import socketserver
import threading
import time
from dataclasses import asdict, dataclass
from math import prod
from pathlib import Path

import numpy as np
from django.conf import settings

from .exceptions import (
    ConfigError,
    InferenceTimeout,
    NetworkError,
    RemoteInferenceError,
    TailUnavailableError,
    WireError,
)
from .network import Model, SplitPlan, checkpoint_load
from .training import accuracy
from .wire import (
    HEADER,
    ErrorCode,
    Frame,
    MsgType,
    decode_frame,
    error_frame,
    ping,
    recv_frame_bytes,
    send_frame,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelModel:
    """Canal fiável com largura de banda (B/s) e latência de ida (s)."""
    bandwidth_bytes_per_s: float
    latency_s: float = 0.0

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0:
            raise ConfigError(f"Largura de banda {self.bandwidth_bytes_per_s} tem de ser positiva.")
        if self.latency_s < 0:
            raise ConfigError(f"Latência {self.latency_s} não pode ser negativa.")

    @classmethod
    def from_settings(cls) -> "ChannelModel":
        return cls(**settings.ISPLIT['CHANNEL'])


def estimate_transfer(payload_bytes: int, channel: ChannelModel) -> float:
    """Segundos para enviar o payload: latência + bytes / largura de banda."""
    return channel.latency_s + payload_bytes / channel.bandwidth_bytes_per_s


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = str(address).rpartition(':')
    if not sep or not port.isdigit():
        raise ConfigError(f"Endereço inválido '{address}'; use host:porta.")
    return host or '127.0.0.1', int(port)


# --- Servidor da cauda ---

def _request_id_of(raw: bytes) -> int:
    """request_id lido sem validar a trama (0 se nem o cabeçalho chegou)."""
    if len(raw) < HEADER.size:
        return 0
    return HEADER.unpack_from(raw)[3]


class _TailHandler(socketserver.BaseRequestHandler):
    """Uma ligação: um pedido de cada vez, até o cliente fechar."""

    def handle(self):
        server = self.server
        if not server.slots.acquire(blocking=False):
            logger.warning(f"Ligação de {self.client_address} recusada: {server.max_connections} ligações ativas.")
            self._send(error_frame(0, ErrorCode.BUSY))
            return
        try:
            self.request.settimeout(server.timeout_s)
            while True:
                try:
                    raw = recv_frame_bytes(self.request, server.max_frame_bytes)
                except WireError as exc:
                    # Sem o corpo não há como ressincronizar: responde e fecha
                    logger.warning(f"{self.client_address}: {exc}")
                    self._send(error_frame(0, ErrorCode(exc.code)))
                    return
                except (socket.timeout, ConnectionError, OSError) as exc:
                    logger.debug(f"{self.client_address}: ligação terminada ({exc}).")
                    return
                if raw is None:
                    return
                if not self._send(server.respond(raw)):
                    return
        finally:
            server.slots.release()

    def _send(self, frame: Frame) -> bool:
        try:
            send_frame(self.request, frame)
            return True
        except OSError as exc:
            logger.debug(f"{self.client_address}: envio falhou ({exc}).")
            return False


class TailServer(socketserver.ThreadingTCPServer):
    """
    Servidor TCP que corre decoder + cauda sobre um modelo partilhado só de
    leitura; cada ligação é atendida numa thread própria.
    """
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], tail: Model, max_connections: int | None = None,
                 timeout_s: float | None = None, max_frame_bytes: int | None = None):
        isplit = settings.ISPLIT
        self.tail = tail
        self.max_connections = isplit['MAX_CONNECTIONS'] if max_connections is None else int(max_connections)
        self.timeout_s = isplit['SOCKET_TIMEOUT_S'] if timeout_s is None else float(timeout_s)
        self.max_frame_bytes = isplit['MAX_FRAME_BYTES'] if max_frame_bytes is None else int(max_frame_bytes)
        if self.max_connections < 1:
            raise ConfigError(f"max_connections={self.max_connections} tem de ser pelo menos 1.")
        if self.timeout_s <= 0 or self.max_frame_bytes < 1:
            raise ConfigError(
                f"timeout_s={self.timeout_s} e max_frame_bytes={self.max_frame_bytes} têm de ser positivos."
            )
        self.slots = threading.BoundedSemaphore(self.max_connections)
        self._thread = None
        super().__init__(address, _TailHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def _accepts(self, tensor: np.ndarray) -> bool:
        shape = tensor.shape
        return shape == self.tail.input_shape or shape[1:] == self.tail.input_shape

    def respond(self, raw: bytes) -> Frame:
        """Resposta a uma trama; nunca levanta exceção."""
        try:
            frame = decode_frame(raw)
        except WireError as exc:
            logger.info(f"Trama rejeitada ({ErrorCode(exc.code).name}): {exc}")
            return error_frame(_request_id_of(raw), ErrorCode(exc.code))

        if frame.msg_type == MsgType.PING:
            return ping(frame.request_id)
        if frame.msg_type != MsgType.INFER_REQUEST:
            return error_frame(frame.request_id, ErrorCode.BAD_MSG_TYPE)
        if frame.tensor is None or not self._accepts(frame.tensor):
            shape = None if frame.tensor is None else frame.tensor.shape
            logger.info(f"Pedido {frame.request_id}: latente {shape} != {self.tail.input_shape}.")
            return error_frame(frame.request_id, ErrorCode.SHAPE_MISMATCH)
        try:
            logits = self.tail.forward(frame.tensor)
        except Exception:
            logger.exception(f"Falha da cauda no pedido {frame.request_id}.")
            return error_frame(frame.request_id, ErrorCode.INTERNAL)
        logger.debug(f"Pedido {frame.request_id} respondido ({logits.shape}).")
        return Frame(MsgType.INFER_RESPONSE, frame.request_id, logits.astype(np.float32))

    def start(self) -> "TailServer":
        self._thread = threading.Thread(target=self.serve_forever, name='tail-server', daemon=True)
        self._thread.start()
        logger.info(f"Servidor da cauda em {self.address} (máx. {self.max_connections} ligações).")
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "TailServer":
        return self

    def __exit__(self, *exc_info) -> None:
        if self._thread is not None:
            self.stop()
        else:
            self.server_close()


def serve_tail(bind_address: str, tail_checkpoint, max_connections: int | None = None,
               start: bool = True, **options) -> TailServer:
    """Carrega a cauda e abre o servidor; checkpoint ou bind inválidos falham já."""
    tail = tail_checkpoint if isinstance(tail_checkpoint, Model) else checkpoint_load(tail_checkpoint)
    host, port = parse_address(bind_address)
    try:
        server = TailServer((host, port), tail, max_connections, **options)
    except OSError as exc:
        raise NetworkError(f"Não foi possível abrir {bind_address}: {exc}") from exc
    return server.start() if start else server


# --- Cliente da cabeça ---

@dataclass(frozen=True)
class InferenceTiming:
    """
    Tempos em ms. `transfer_ms` é o RTT de um ping na mesma ligação e
    `tail_ms` o excesso do RTT do pedido sobre esse ping.
    """
    head_ms: float
    transfer_ms: float
    tail_ms: float
    total_ms: float

    def to_dict(self) -> dict:
        return asdict(self)


class HeadClient:
    """Mantém uma ligação ao servidor da cauda para vários pedidos sequenciais."""

    def __init__(self, head: Model | str | Path, server_address: str, timeout_s: float | None = None):
        self.head = head if isinstance(head, Model) else checkpoint_load(head)
        self.address = parse_address(server_address)
        self.timeout_s = timeout_s or settings.ISPLIT['SOCKET_TIMEOUT_S']
        self.max_frame_bytes = settings.ISPLIT['MAX_FRAME_BYTES']
        self._sock = None
        self._next_id = 1

    def connect(self) -> "HeadClient":
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout_s)
            except socket.timeout as exc:
                raise InferenceTimeout(f"Sem resposta de {self.address} em {self.timeout_s}s.") from exc
            except OSError as exc:
                raise TailUnavailableError(f"Servidor da cauda indisponível em {self.address}: {exc}") from exc
        return self

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self) -> "HeadClient":
        return self.connect()

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _exchange(self, frame: Frame) -> Frame:
        self.connect()
        try:
            send_frame(self._sock, frame)
            raw = recv_frame_bytes(self._sock, self.max_frame_bytes)
        except socket.timeout as exc:
            self.close()
            raise InferenceTimeout(f"Pedido {frame.request_id} sem resposta em {self.timeout_s}s.") from exc
        except WireError as exc:
            self.close()
            if isinstance(exc.__cause__, socket.timeout):
                raise InferenceTimeout(f"Resposta ao pedido {frame.request_id} parou a meio: {exc}") from exc
            raise TailUnavailableError(f"Resposta ao pedido {frame.request_id} incompleta: {exc}") from exc
        except OSError as exc:
            self.close()
            raise TailUnavailableError(f"Ligação perdida durante o pedido {frame.request_id}: {exc}") from exc
        if raw is None:
            self.close()
            raise TailUnavailableError(f"O servidor fechou a ligação no pedido {frame.request_id}.")
        reply = decode_frame(raw)
        if reply.msg_type == MsgType.ERROR:
            raise RemoteInferenceError(int(reply.error_code or ErrorCode.INTERNAL), reply.request_id)
        if reply.request_id != frame.request_id:
            raise WireError(ErrorCode.INTERNAL, f"Resposta {reply.request_id} para o pedido {frame.request_id}.")
        return reply

    def _request_id(self) -> int:
        request_id, self._next_id = self._next_id, self._next_id + 1
        return request_id

    def ping(self) -> float:
        """RTT de um ping em segundos."""
        started = time.perf_counter()
        self._exchange(ping(self._request_id()))
        return time.perf_counter() - started

    def send_encoded(self, encoded: np.ndarray) -> np.ndarray:
        frame = Frame(MsgType.INFER_REQUEST, self._request_id(), np.asarray(encoded, dtype=np.float32))
        return self._exchange(frame).tensor

    def infer(self, image: np.ndarray) -> tuple[np.ndarray, InferenceTiming]:
        started = time.perf_counter()
        encoded = self.head.forward(image)
        head_s = time.perf_counter() - started
        ping_s = self.ping()
        sent = time.perf_counter()
        logits = self.send_encoded(encoded)
        round_trip_s = time.perf_counter() - sent
        total_s = time.perf_counter() - started
        timing = InferenceTiming(head_s * 1000, ping_s * 1000, max(round_trip_s - ping_s, 0.0) * 1000, total_s * 1000)
        logger.debug(f"Inferência remota: {timing}")
        return logits, timing


def head_infer(image: np.ndarray, head_checkpoint, server_address: str,
               timeout: float | None = None) -> tuple[np.ndarray, InferenceTiming]:
    """Um pedido isolado: corre a cabeça localmente e a cauda no servidor."""
    with HeadClient(head_checkpoint, server_address, timeout) as client:
        return client.infer(image)


# --- Relatório de varrimento ---

@dataclass(frozen=True)
class SweepRow:
    layer: int
    layer_name: str
    raw_bytes: int
    encoded_bytes: int
    transfer_s: float
    accuracy: float | None

    @property
    def ratio(self) -> float:
        return self.encoded_bytes / self.raw_bytes


@dataclass(frozen=True)
class SweepReport:
    rows: list
    channel: ChannelModel
    input_bytes: int
    input_transfer_s: float
    unsplit_accuracy: float | None

    def reference(self) -> dict:
        """Linha 'cloud-only': enviar a própria imagem para o servidor."""
        return {'input_bytes': self.input_bytes, 'transfer_s': self.input_transfer_s,
                'accuracy': self.unsplit_accuracy}


def sweep_report(model: Model, plans, channel: ChannelModel, dataset=None,
                 accuracies: dict | None = None) -> SweepReport:
    """
    Uma linha por plano de divisão, ordenada pela camada.

    A exatidão vem de `accuracies` (camada → valor) ou, na falta disso, é
    medida em `dataset`; sem nenhum dos dois fica None.
    """
    accuracies = accuracies or {}
    rows = []
    for plan in sorted(plans, key=lambda p: p.target_layer):
        layer = model.layers[plan.target_layer]
        if plan.target_layer in accuracies:
            measured = accuracies[plan.target_layer]
        elif dataset is not None:
            measured = accuracy(plan.predict(dataset.images), dataset.labels)
        else:
            measured = None
        rows.append(SweepRow(
            plan.target_layer, layer.name, prod(layer.output_shape) * 4, plan.payload_bytes,
            estimate_transfer(plan.payload_bytes, channel), measured,
        ))
    input_bytes = prod(model.input_shape) * 4
    unsplit = accuracy(model.predict(dataset.images), dataset.labels) if dataset is not None else None
    return SweepReport(rows, channel, input_bytes, estimate_transfer(input_bytes, channel), unsplit)
