"""Small text formats shared by commands: manifests, line-delimited metrics,
and frozen resolved configs.

None of these embed timestamps or absolute paths, so rerunning a command from
its frozen config reproduces output bytes exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import DataError


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    out: dict[str, str] = {}
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{i}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False)


def write_metrics(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(metrics_line(rec) + "\n")


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing metrics file {path}")
    records = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{i}: malformed metrics line: {e}") from e
    return records
