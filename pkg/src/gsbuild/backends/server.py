"""Backend-side loop for the line protocol.

A model wrapper only has to provide ``handler(request) -> response``;
``serve`` takes care of the handshake, heartbeats and both transport modes.
"""
from __future__ import annotations

import argparse
import json
import sys
import threading
from typing import Callable, TextIO

from gsbuild.backends import protocol as P

HEARTBEAT_S = 60.0


def _answer(handler: Callable[[dict], dict], line: str) -> dict:
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        return P.error_record("", f"bad request line: {exc}", False)
    try:
        return handler(req)
    except Exception as exc:
        transient = type(exc).__name__ == "TransientBackendError"
        return P.error_record(req.get("id", ""), f"{type(exc).__name__}: {exc}", transient)


def _with_heartbeat(handler, line: str, out: TextIO, lock: threading.Lock, heartbeat_s: float) -> dict:
    done = threading.Event()
    box: list[dict] = []

    def run() -> None:
        box.append(_answer(handler, line))
        done.set()

    threading.Thread(target=run, daemon=True).start()
    while not done.wait(heartbeat_s):
        with lock:
            out.write(P.dumps({"heartbeat": True}) + "\n")
            out.flush()
    return box[0]


def serve_stream(handler: Callable[[dict], dict], role: str, inp: TextIO = sys.stdin, out: TextIO = sys.stdout,
                 heartbeat_s: float = HEARTBEAT_S) -> None:
    lock = threading.Lock()
    out.write(P.dumps(P.handshake(role)) + "\n")
    out.flush()
    for line in inp:
        if not line.strip():
            continue
        resp = _with_heartbeat(handler, line, out, lock, heartbeat_s)
        with lock:
            out.write(P.dumps(resp) + "\n")
            out.flush()


def serve_files(handler: Callable[[dict], dict], role: str, requests_path: str, responses_path: str) -> None:
    with open(requests_path, encoding="utf-8") as inp, open(responses_path, "w", encoding="utf-8") as out:
        out.write(P.dumps(P.handshake(role)) + "\n")
        for line in inp:
            if line.strip():
                out.write(P.dumps(_answer(handler, line)) + "\n")


def add_transport_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--requests", help="file-handoff mode: request file")
    parser.add_argument("--responses", help="file-handoff mode: response file")
    parser.add_argument("--heartbeat", type=float, default=HEARTBEAT_S)


def serve(handler: Callable[[dict], dict], role: str, args: argparse.Namespace) -> None:
    if args.requests:
        if not args.responses:
            raise SystemExit("--responses is required with --requests")
        serve_files(handler, role, args.requests, args.responses)
    else:
        serve_stream(handler, role, heartbeat_s=args.heartbeat)
