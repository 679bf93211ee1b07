"""
Hierarquia de erros do toolkit.

Cada erro carrega o código de saída que os comandos de gestão devolvem
ao sistema operativo (0 ok, 1 config, 2 dados, 3 estágio, 4 rede).
"""


class ISplitError(Exception):
    """Erro base de todas as falhas conhecidas do toolkit."""
    exit_code = 3


# --- Erros de configuração e de dados ---

class ConfigError(ISplitError):
    exit_code = 1


class DatasetError(ISplitError):
    exit_code = 2


class StageError(ISplitError):
    """Falha de um estágio do pipeline; guarda o nome do estágio."""
    exit_code = 3

    def __init__(self, stage: str, message: str, exit_code: int | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        if exit_code is not None:
            self.exit_code = exit_code


# --- Motor de tensores ---

class ShapeError(ISplitError, ValueError):
    pass


class TapeError(ISplitError):
    pass


class DetachedTensorError(TapeError):
    pass


class NumericalError(ISplitError, FloatingPointError):
    pass


# --- Modelo, checkpoints e interpretabilidade ---

class ArchitectureError(ISplitError):
    exit_code = 1


class UnsupportedLayerError(ISplitError):
    pass


class CheckpointError(ISplitError):
    exit_code = 2


class MagicMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class BottleneckError(ISplitError):
    pass


class PhaseOrderError(ISplitError):
    pass


# --- Rede ---

class NetworkError(ISplitError):
    exit_code = 4


class WireError(NetworkError):
    """Frame inválido; `code` é o motivo enviado no frame de erro."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = int(code)


class RemoteInferenceError(NetworkError):
    """O servidor da cauda respondeu com um frame de erro."""

    def __init__(self, code: int, request_id: int):
        super().__init__(f"Servidor respondeu com erro {code} ao pedido {request_id}.")
        self.code = int(code)
        self.request_id = request_id


class InferenceTimeout(NetworkError):
    pass


class TailUnavailableError(NetworkError):
    pass
