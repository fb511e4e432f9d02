"""Output files that carry their own provenance.

Every CSV starts with ``#`` comment lines holding the resolved config and
seed; floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

METRIC_COLUMNS = ("epoch", "seed", "variant", "task_loss", "distill_loss", "mIoU")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def provenance_lines(config_json: str, seed=None) -> list[str]:
    lines = [f"config={config_json}"]
    if seed is not None:
        lines.append(f"seed={seed}")
    return lines


def write_csv(path, columns, rows, config_json: str, seed=None) -> None:
    buf = io.StringIO()
    for line in provenance_lines(config_json, seed):
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c, "")) for c in columns])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[dict, list[dict]]:
    """``(provenance, rows)``; provenance maps ``config``/``seed`` to parsed values."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition("=")
            meta[key] = json.loads(val) if key == "config" else val
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    return meta, rows


def array_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_json(path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
