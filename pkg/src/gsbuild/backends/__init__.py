"""Process-boundary contract for every ML model the pipeline uses."""
from gsbuild.backends.client import (
    BackendError,
    CapacityError,
    InProcessBackend,
    ProcessBackend,
    TransientBackendError,
    call_batch,
    detect_language_mid_window,
    detect_languages,
    emit_batch,
    identify_language,
    mid_window,
    train,
    transcribe_batch,
)
from gsbuild.backends.protocol import (
    PROTOCOL,
    EmitRequest,
    LidRequest,
    ModelHandle,
    TrainRequest,
    TranscribeRequest,
)

__all__ = [
    "PROTOCOL", "BackendError", "CapacityError", "EmitRequest", "InProcessBackend", "LidRequest",
    "ModelHandle", "ProcessBackend", "TrainRequest", "TranscribeRequest", "TransientBackendError",
    "call_batch", "detect_language_mid_window", "detect_languages", "emit_batch", "identify_language", "mid_window",
    "train", "transcribe_batch",
]
