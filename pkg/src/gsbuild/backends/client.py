"""Engine side of the backend contract.

Backends are either in-process handlers (used by tests and the reference
mocks) or child processes speaking line-delimited JSON, in streaming or
file-handoff mode.  Both expose ``submit``; retries, accounting and record
decoding live in the module-level operations.
"""
from __future__ import annotations

import json
import logging
import os
import queue
import subprocess
import tempfile
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from gsbuild.backends import protocol as P

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 2
DEFAULT_BACKOFF_S = 0.5
REALTIME_FACTOR_TIMEOUT = 10.0
MIN_TIMEOUT_S = 30.0
HEARTBEAT_TIMEOUT_S = 180.0
HANDSHAKE_TIMEOUT_S = 60.0
MID_WINDOW_S = 30.0


class BackendError(RuntimeError):
    """Backend failed in a way the engine cannot recover from."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message if not diagnostics else f"{message}\n--- backend diagnostics ---\n{diagnostics}")
        self.diagnostics = diagnostics


class TransientBackendError(BackendError):
    """Raised by in-process handlers to request a retry."""


class CapacityError(ValueError):
    pass


def request_timeout(req: dict) -> Optional[float]:
    """Seconds allowed for one request; None means heartbeat-driven."""
    kind = req.get("type")
    if kind == "train":
        return None
    if kind in ("transcribe", "emit"):
        span = max(0.0, float(req.get("end_s", 0.0)) - float(req.get("start_s", 0.0)))
        return max(MIN_TIMEOUT_S, REALTIME_FACTOR_TIMEOUT * span)
    return MIN_TIMEOUT_S


class InProcessBackend:
    """Wraps a ``handler(request) -> response`` callable."""

    def __init__(self, role: str, handler: Callable[[dict], dict]):
        self.role = role
        self.handler = handler
        self.requests_sent = 0
        self._lock = threading.Lock()

    def _one(self, req: dict) -> dict:
        with self._lock:
            self.requests_sent += 1
        try:
            return self.handler(req)
        except TransientBackendError as exc:
            return P.error_record(req["id"], str(exc), True)
        except Exception as exc:  # handler bugs surface as permanent failures
            return P.error_record(req["id"], f"{type(exc).__name__}: {exc}", False)

    def submit(self, requests: Sequence[dict], parallelism: int = 1) -> dict[str, dict]:
        if parallelism <= 1 or len(requests) <= 1:
            return {r["id"]: self._one(r) for r in requests}
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return {r["id"]: resp for r, resp in zip(requests, pool.map(self._one, requests))}

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_EOF = object()


class ProcessBackend:
    """A model behind a child process.

    In ``stream`` mode one long-lived child reads requests on stdin and
    answers on stdout, possibly out of order.  In ``file`` mode the command is
    run once per batch with ``--requests IN --responses OUT`` appended.
    """

    def __init__(self, role: str, command: Sequence[str], mode: str = "stream",
                 heartbeat_timeout_s: float = HEARTBEAT_TIMEOUT_S, env: Optional[dict] = None,
                 timeout_fn: Callable[[dict], Optional[float]] = request_timeout,
                 cwd: Optional[str] = None):
        if mode not in ("stream", "file"):
            raise ValueError(f"unknown backend mode {mode!r}")
        if role not in P.ROLES:
            raise ValueError(f"unknown backend role {role!r}")
        self.role = role
        self.command = list(command)
        self.mode = mode
        self.heartbeat_timeout_s = heartbeat_timeout_s
        self.env = env
        self.timeout_fn = timeout_fn
        self.cwd = cwd
        self.requests_sent = 0
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue" = queue.Queue()
        self._stderr = None
        self._hung = False

    # -- child management
    def _stderr_tail(self, limit: int = 4000) -> str:
        if self._stderr is None:
            return ""
        self._stderr.flush()
        self._stderr.seek(0)
        return self._stderr.read()[-limit:]

    def _check_handshake(self, line: str) -> None:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            rec = {}
        if rec.get("protocol") != P.PROTOCOL or rec.get("role") != self.role:
            raise BackendError(f"bad handshake from {self.role} backend: {line.strip()!r}", self._stderr_tail())

    def _start(self) -> None:
        self._stderr = tempfile.TemporaryFile(mode="w+", encoding="utf-8")
        env = dict(os.environ, **(self.env or {}))
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          stderr=self._stderr, text=True, encoding="utf-8", bufsize=1, env=env,
                                          cwd=self.cwd)
        except OSError as exc:
            raise BackendError(f"cannot start {self.role} backend {self.command[0]!r}: {exc}") from exc
        self._lines = queue.Queue()
        proc, lines = self._proc, self._lines

        def pump() -> None:
            for line in proc.stdout:
                lines.put(line)
            lines.put(_EOF)

        threading.Thread(target=pump, daemon=True).start()
        try:
            first = lines.get(timeout=HANDSHAKE_TIMEOUT_S)
        except queue.Empty:
            self.close()
            raise BackendError(f"{self.role} backend sent no handshake") from None
        if first is _EOF:
            diag = self._stderr_tail()
            self.close()
            raise BackendError(f"{self.role} backend exited before handshake", diag)
        self._check_handshake(first)

    def _ensure_started(self) -> None:
        if self._proc is None or self._proc.poll() is not None:
            self._start()

    def close(self) -> None:
        proc, self._proc = self._proc, None
        hung, self._hung = self._hung, False
        if proc is not None and hung:
            # a child that missed a deadline may never read stdin again
            proc.kill()
            proc.wait()
        elif proc is not None:
            try:
                if proc.stdin:
                    proc.stdin.close()
                proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- submission
    def submit(self, requests: Sequence[dict], parallelism: int = 1) -> dict[str, dict]:
        if not requests:
            return {}
        self.requests_sent += len(requests)
        if self.mode == "file":
            return self._submit_file(requests)
        return self._submit_stream(requests, max(1, parallelism))

    def _deadline(self, req: dict, now: float) -> float:
        limit = self.timeout_fn(req)
        return now + (self.heartbeat_timeout_s if limit is None else limit)

    def _submit_stream(self, requests: Sequence[dict], parallelism: int) -> dict[str, dict]:
        self._ensure_started()
        results: dict[str, dict] = {}
        todo = deque(requests)
        inflight: dict[str, tuple[dict, float]] = {}
        while todo or inflight:
            while todo and len(inflight) < parallelism:
                req = todo.popleft()
                try:
                    self._proc.stdin.write(P.dumps(req) + "\n")
                    self._proc.stdin.flush()
                except (BrokenPipeError, OSError):
                    todo.appendleft(req)
                    return self._abandon(results, inflight, todo, "backend stdin closed")
                inflight[req["id"]] = (req, self._deadline(req, time.monotonic()))
            wait = max(0.0, min(d for _, d in inflight.values()) - time.monotonic())
            try:
                line = self._lines.get(timeout=wait)
            except queue.Empty:
                now = time.monotonic()
                for key, (req, deadline) in list(inflight.items()):
                    if deadline <= now:
                        hung = req.get("type") == "train"
                        msg = "no heartbeat" if hung else "request timed out"
                        results[key] = P.error_record(key, msg, transient=not hung)
                        del inflight[key]
                        self._hung = True
                continue
            if line is _EOF:
                return self._abandon(results, inflight, todo, "backend exited")
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                log.warning("%s backend emitted a non-JSON line: %r", self.role, line[:200])
                continue
            if rec.get("heartbeat"):
                now = time.monotonic()
                inflight = {k: (r, self._deadline(r, now)) for k, (r, _) in inflight.items()}
                continue
            key = rec.get("id")
            if key in inflight:
                results[key] = rec
                del inflight[key]
        return results

    def _abandon(self, results, inflight, todo, why: str) -> dict[str, dict]:
        diag = self._stderr_tail()
        self.close()
        for key in list(inflight) + [r["id"] for r in todo]:
            results[key] = P.error_record(key, f"{why}: {diag[-500:]}", transient=True)
        return results

    def _submit_file(self, requests: Sequence[dict]) -> dict[str, dict]:
        with tempfile.TemporaryDirectory(prefix="gsb-") as tmp:
            req_path, resp_path = Path(tmp, "requests.jsonl"), Path(tmp, "responses.jsonl")
            req_path.write_text("".join(P.dumps(r) + "\n" for r in requests), encoding="utf-8")
            limits = [self.timeout_fn(r) for r in requests]
            timeout = None if any(x is None for x in limits) else sum(limits)
            try:
                done = subprocess.run(self.command + ["--requests", str(req_path), "--responses", str(resp_path)],
                                      capture_output=True, text=True, timeout=timeout,
                                      env=dict(os.environ, **(self.env or {})), cwd=self.cwd)
            except OSError as exc:
                raise BackendError(f"cannot start {self.role} backend {self.command[0]!r}: {exc}") from exc
            except subprocess.TimeoutExpired:
                return {r["id"]: P.error_record(r["id"], "batch timed out", True) for r in requests}
            if done.returncode != 0:
                msg = f"backend exited with status {done.returncode}: {done.stderr[-2000:]}"
                return {r["id"]: P.error_record(r["id"], msg, False) for r in requests}
            lines = resp_path.read_text(encoding="utf-8").splitlines() if resp_path.exists() else []
            if not lines:
                raise BackendError(f"{self.role} backend wrote no handshake", done.stderr[-2000:])
            self._check_handshake(lines[0])
            wanted = {r["id"] for r in requests}
            results = {}
            for line in lines[1:]:
                rec = json.loads(line)
                if rec.get("id") in wanted:
                    results[rec["id"]] = rec
            return results


def call_batch(backend, requests: Sequence[dict], parallelism: int = 1, retries: int = DEFAULT_RETRIES,
               backoff_s: float = DEFAULT_BACKOFF_S, sleep: Callable[[float], None] = time.sleep
               ) -> tuple[dict[str, dict], dict[str, str]]:
    """Send ``requests``, retrying transient failures with exponential backoff.

    Returns (answers, parked); every request id lands in exactly one of them.
    """
    ids = [r["id"] for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate request ids in batch")
    answers: dict[str, dict] = {}
    parked: dict[str, str] = {}
    pending = list(requests)
    for attempt in range(retries + 1):
        if not pending:
            break
        got = backend.submit(pending, parallelism)
        retry = []
        for req in pending:
            rec = got.get(req["id"]) or P.error_record(req["id"], "no response", True)
            if not P.is_error(rec):
                answers[req["id"]] = rec
            elif rec.get("transient") and attempt < retries:
                retry.append(req)
            else:
                parked[req["id"]] = rec["error"]
        pending = retry
        if pending:
            delay = backoff_s * (2 ** attempt)
            log.info("retrying %d %s requests in %.2fs", len(pending), backend.role, delay)
            if delay > 0:
                sleep(delay)
    return answers, parked


# ---------------------------------------------------------------- operations

def transcribe_batch(backend, requests: Sequence[P.TranscribeRequest], parallelism: int = 4,
                     retries: int = DEFAULT_RETRIES, backoff_s: float = DEFAULT_BACKOFF_S
                     ) -> tuple[list[P.TranscribeResponse], dict[str, str]]:
    answers, parked = call_batch(backend, [r.to_wire() for r in requests], parallelism, retries, backoff_s)
    out = []
    for r in requests:
        if r.id in answers:
            try:
                out.append(P.TranscribeResponse.from_wire(answers[r.id]))
            except (KeyError, TypeError, ValueError) as exc:
                parked[r.id] = f"malformed response: {exc}"
    return out, parked


def mid_window(duration_s: float, window_s: float = MID_WINDOW_S) -> tuple[float, float]:
    if duration_s <= 0:
        raise ValueError("video duration must be positive")
    mid = duration_s / 2.0
    return max(0.0, mid - window_s / 2.0), min(duration_s, mid + window_s / 2.0)


def detect_languages(backend, videos, parallelism: int = 4, window_s: float = MID_WINDOW_S,
                     retries: int = DEFAULT_RETRIES, backoff_s: float = DEFAULT_BACKOFF_S
                     ) -> tuple[dict[str, tuple[str, float]], dict[str, str]]:
    """Mid-window language detection for many videos: ({id: (language, prob)}, parked)."""
    reqs = []
    for v in videos:
        start, end = mid_window(v.duration_s, window_s)
        reqs.append(P.TranscribeRequest(id=v.id, audio_path=v.path, start_s=start, end_s=end,
                                        detect_language=True).to_wire())
    answers, parked = call_batch(backend, reqs, parallelism, retries, backoff_s)
    out = {}
    for key, rec in answers.items():
        resp = P.TranscribeResponse.from_wire(rec)
        if resp.language is None:
            parked[key] = "transcriber returned no language"
        else:
            out[key] = (resp.language, float(resp.language_prob if resp.language_prob is not None else 1.0))
    return out, parked


def detect_language_mid_window(video, backend, window_s: float = MID_WINDOW_S,
                               retries: int = DEFAULT_RETRIES, backoff_s: float = DEFAULT_BACKOFF_S
                               ) -> tuple[str, float]:
    """Language of the middle ``window_s`` seconds of a video."""
    start, end = mid_window(video.duration_s, window_s)
    req = P.TranscribeRequest(id=video.id, audio_path=video.path, start_s=start, end_s=end, detect_language=True)
    answers, parked = call_batch(backend, [req.to_wire()], 1, retries, backoff_s)
    if video.id in parked:
        raise BackendError(f"language detection failed for {video.id}: {parked[video.id]}")
    resp = P.TranscribeResponse.from_wire(answers[video.id])
    if resp.language is None:
        raise BackendError(f"transcriber returned no language for {video.id}")
    return resp.language, float(resp.language_prob if resp.language_prob is not None else 1.0)


def manifest_has_segments(path: str | Path) -> bool:
    try:
        with open(path, encoding="utf-8") as fh:
            return any('"kind": "segment"' in line for line in fh)
    except OSError:
        return False


def check_capacity(previous: Optional[P.ModelHandle], capacity: str) -> None:
    rank = P.capacity_rank(capacity)
    if previous is not None and rank < previous.rank:
        raise CapacityError(f"student capacity {capacity} is smaller than teacher capacity {previous.capacity}")


def train(backend, req: P.TrainRequest, previous: Optional[P.ModelHandle] = None) -> P.TrainResponse:
    if req.noise_config is None:
        raise ValueError("noise_config is required")
    check_capacity(previous, req.capacity)
    if not manifest_has_segments(req.manifest_path):
        raise ValueError(f"training manifest {req.manifest_path} is empty")
    answers, parked = call_batch(backend, [req.to_wire()], 1, retries=0)
    if req.id in parked:
        raise BackendError(f"training request {req.id} failed", parked[req.id])
    resp = P.TrainResponse.from_wire(answers[req.id])
    if resp.model.capacity != req.capacity:
        raise BackendError(f"trainer returned capacity {resp.model.capacity}, asked for {req.capacity}")
    return resp


def identify_language(backend, items: Iterable[tuple[str, str]], parallelism: int = 8,
                      retries: int = DEFAULT_RETRIES, backoff_s: float = DEFAULT_BACKOFF_S
                      ) -> tuple[dict[str, P.LidResponse], dict[str, str]]:
    reqs = [P.LidRequest(key, text).to_wire() for key, text in items]
    answers, parked = call_batch(backend, reqs, parallelism, retries, backoff_s)
    out = {}
    for key, rec in answers.items():
        try:
            out[key] = P.LidResponse.from_wire(rec)
        except (KeyError, TypeError, ValueError) as exc:
            parked[key] = f"malformed response: {exc}"
    return out, parked


def emit_batch(backend, requests: Sequence[P.EmitRequest], parallelism: int = 4,
               retries: int = DEFAULT_RETRIES, backoff_s: float = DEFAULT_BACKOFF_S
               ) -> tuple[dict[str, P.EmitResponse], dict[str, str]]:
    answers, parked = call_batch(backend, [r.to_wire() for r in requests], parallelism, retries, backoff_s)
    return {k: P.EmitResponse.from_wire(v) for k, v in answers.items()}, parked
