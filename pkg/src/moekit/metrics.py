"""Line-delimited metrics records with a frozen, versioned schema.

One JSON object per line. Field names are fixed per command; consumers
must tolerate added fields but names are never renamed. Records carry no
wall-clock time so identical (config, seed) runs produce byte-identical
files; invocation metadata lives in the run manifest instead.
"""

from __future__ import annotations

import json
import platform
import time

SCHEMA_VERSION = 1


class MetricsWriter:
    """Appends one record per line to a metrics file."""

    def __init__(self, path, command: str):
        self.path = path
        self.command = command
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        doc = {"schema": SCHEMA_VERSION, "command": self.command}
        doc.update(record)
        self._fh.write(json.dumps(doc) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_manifest(path, command: str, config_path: str, seed: int) -> None:
    """Run provenance (includes wall-clock; not part of the deterministic
    metrics contract)."""
    doc = {
        "schema": SCHEMA_VERSION,
        "command": command,
        "config": str(config_path),
        "seed": seed,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "platform": platform.platform(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
