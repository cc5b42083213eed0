"""Line-delimited metrics and episode logs.

One JSON object per line, schema-versioned, appended as training progresses.
Keys are sorted and floats use their shortest round-trip representation, so
two runs with identical seeds produce byte-identical files. Timestamps never
appear here; they live in the sidecar run manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

SCHEMA_VERSION = 1

__all__ = ["SCHEMA_VERSION", "JsonlWriter", "read_jsonl"]


class JsonlWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True))
        self._fh.write("\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: str | Path) -> list[dict]:
    """Parse a metrics or episode file; malformed lines raise ValueError."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: malformed metrics line") from err
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            records.append(record)
    return records
