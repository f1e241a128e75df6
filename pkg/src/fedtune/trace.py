"""Line-delimited JSON session traces.

One event per line, keys sorted, compact separators: the byte content of a
trace file is a pure function of (config, seed). Event kinds: session,
dispatch, round, eval, decision, summary.
"""

from __future__ import annotations

import json
from typing import Iterable

import numpy as np

from .errors import TraceParseError

TRACE_VERSION = 1


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    return value


def encode_event(event: dict) -> str:
    return json.dumps(_jsonable(event), sort_keys=True, separators=(",", ":"))


class TraceWriter:
    """Streams events to a file as they happen."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w")
        self.events: list[dict] = []

    def emit(self, event: dict) -> None:
        event = _jsonable(event)
        self._fh.write(encode_event(event) + "\n")
        self.events.append(event)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_trace(path: str) -> list[dict]:
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise TraceParseError(f"{path}: malformed trace at line {lineno}: {err}") from err
    return events


def events_of_kind(events: Iterable[dict], kind: str) -> list[dict]:
    return [e for e in events if e.get("evt") == kind]
