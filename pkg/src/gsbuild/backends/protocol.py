"""Wire records exchanged with model backends.

Every record is one JSON object per line, UTF-8.  A backend process first
writes a handshake line ``{"protocol": "gsb/1", "role": ...}``.  Failed
requests are answered with ``{"id": ..., "error": ..., "transient": bool}``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

PROTOCOL = "gsb/1"

TRANSCRIBER, TRAINER, LID, ACOUSTIC = "transcriber", "trainer", "lid", "acoustic"
ROLES = (TRANSCRIBER, TRAINER, LID, ACOUSTIC)

CAPACITY_ORDER = ("XS", "S", "M", "L", "XL")


def handshake(role: str) -> dict:
    return {"protocol": PROTOCOL, "role": role}


def dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def error_record(req_id: str, message: str, transient: bool) -> dict:
    return {"id": req_id, "error": message, "transient": transient}


def is_error(record: dict) -> bool:
    return "error" in record


@dataclass(frozen=True)
class ModelHandle:
    id: str
    capacity: str

    @property
    def rank(self) -> int:
        return capacity_rank(self.capacity)


def capacity_rank(tag: str) -> int:
    try:
        return CAPACITY_ORDER.index(tag)
    except ValueError:
        raise ValueError(f"unknown capacity tag {tag!r}; expected one of {CAPACITY_ORDER}") from None


@dataclass(frozen=True)
class TranscribeRequest:
    id: str
    audio_path: str
    start_s: float
    end_s: float
    language: Optional[str] = None
    model: Optional[str] = None
    detect_language: bool = False
    want_chunks: bool = False

    def to_wire(self) -> dict:
        return {"type": "transcribe", **asdict(self)}


@dataclass(frozen=True)
class Chunk:
    start_s: float
    end_s: float
    text: str


@dataclass(frozen=True)
class TranscribeResponse:
    id: str
    text: str
    avg_logprob: Optional[float] = None
    language: Optional[str] = None
    language_prob: Optional[float] = None
    chunks: tuple[Chunk, ...] = ()

    @classmethod
    def from_wire(cls, rec: dict) -> "TranscribeResponse":
        chunks = tuple(Chunk(float(c["start_s"]), float(c["end_s"]), c["text"]) for c in rec.get("chunks") or ())
        return cls(rec["id"], rec.get("text", ""), rec.get("avg_logprob"), rec.get("language"),
                   rec.get("language_prob"), chunks)


@dataclass(frozen=True)
class TrainRequest:
    id: str
    manifest_path: str
    capacity: str
    noise_config: dict[str, Any]
    seed: int
    language: Optional[str] = None

    def to_wire(self) -> dict:
        return {"type": "train", **asdict(self)}


@dataclass(frozen=True)
class TrainResponse:
    id: str
    model: ModelHandle
    summary: dict = field(default_factory=dict)

    @classmethod
    def from_wire(cls, rec: dict) -> "TrainResponse":
        m = rec["model"]
        return cls(rec["id"], ModelHandle(m["id"], m["capacity"]), rec.get("summary") or {})


@dataclass(frozen=True)
class LidRequest:
    id: str
    text: str

    def to_wire(self) -> dict:
        return {"type": "lid", **asdict(self)}


@dataclass(frozen=True)
class LidResponse:
    id: str
    language: str
    confidence: float

    @classmethod
    def from_wire(cls, rec: dict) -> "LidResponse":
        conf = float(rec["confidence"])
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"LID confidence {conf} outside [0, 1]")
        return cls(rec["id"], rec["language"], conf)


@dataclass(frozen=True)
class EmitRequest:
    """Ask the acoustic backend for CTC emissions of an audio window."""

    id: str
    audio_path: str
    start_s: float
    end_s: float
    output_path: str
    language: Optional[str] = None

    def to_wire(self) -> dict:
        return {"type": "emit", **asdict(self)}


@dataclass(frozen=True)
class EmitResponse:
    id: str
    emission_path: str
    frames: int

    @classmethod
    def from_wire(cls, rec: dict) -> "EmitResponse":
        return cls(rec["id"], rec["emission_path"], int(rec["frames"]))
