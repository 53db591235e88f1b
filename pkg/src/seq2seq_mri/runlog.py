"""Structured run logging: JSON-lines events plus a CSV of per-step scalars."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

log = logging.getLogger("seq2seq_mri")


class EventLog:
    """Appends one JSON object per event to ``events.jsonl``."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, event: str, **fields):
        rec = {"time": round(time.time(), 3), "event": event, **fields}
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
        log.info("%s %s", event, " ".join(f"{k}={v}" for k, v in fields.items()))


class CsvLog:
    def __init__(self, path, columns, append: bool = False):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not (append and self.path.exists()):
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def write(self, row: dict):
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in self.columns])


def _fmt(v):
    # repr keeps every bit of a float, so logs can be compared exactly
    return repr(float(v)) if isinstance(v, float) else v


def file_sha256(path, length: int = 16) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:length]
